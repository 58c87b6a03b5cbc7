import unittest
from parameterized import parameterized

import numpy as np

from flying_patch import errors, networks, synth

INPUT_SHAPE = (8, 10, 1)

SPECS = [
    networks.conv2d(3, 3, stride=1, padding=1),
    networks.RELU,
    networks.FROZEN_BATCHNORM,
    networks.MAXPOOL,
    networks.conv2d(2, 3, stride=2),
    networks.FLATTEN,
    networks.fully_connected(networks.OUTPUT_DIM),
]

def random_weights(seed, specs=SPECS, input_shape=INPUT_SHAPE):
  rng = np.random.default_rng(seed)
  weights = []
  shape = input_shape
  for i, spec in enumerate(specs):
    weights.append({
        name: rng.normal(size=s)
        for name, s in networks.weight_shapes(spec, shape).items()})
    shape = networks.output_shape(spec, shape, i)
  return weights

def random_model(seed=0):
  return networks.VictimModel(SPECS, random_weights(seed), INPUT_SHAPE)

def oracle_forward(specs, weights, image):
  """Nested-loop forward pass on a single [H, W, C] image."""
  x = np.array(image, dtype=np.float64)
  for spec, w in zip(specs, weights):
    kind = spec.kind
    if kind is networks.LayerKind.CONV2D:
      p, k, s = spec.padding, spec.kernel, spec.stride
      x = np.pad(x, [(p, p), (p, p), (0, 0)])
      h, wd, cin = x.shape
      out_h, out_w = (h - k) // s + 1, (wd - k) // s + 1
      out = np.zeros((out_h, out_w, spec.out_channels))
      for i in range(out_h):
        for j in range(out_w):
          for o in range(spec.out_channels):
            total = w['bias'][o]
            for di in range(k):
              for dj in range(k):
                for c in range(cin):
                  total += x[i * s + di, j * s + dj, c] * w['kernel'][di, dj, c, o]
            out[i, j, o] = total
      x = out
    elif kind is networks.LayerKind.RELU:
      x = np.maximum(x, 0)
    elif kind is networks.LayerKind.FROZEN_BATCHNORM:
      x = x * w['scale'] + w['shift']
    elif kind is networks.LayerKind.MAXPOOL:
      h, wd, c = x.shape
      out = np.zeros((h // 2, wd // 2, c))
      for i in range(h // 2):
        for j in range(wd // 2):
          for ch in range(c):
            out[i, j, ch] = max(
                x[2 * i + a, 2 * j + b, ch] for a in range(2) for b in range(2))
      x = out
    elif kind is networks.LayerKind.FLATTEN:
      x = x.reshape(-1)
    elif kind is networks.LayerKind.FULLY_CONNECTED:
      x = x @ w['kernel'] + w['bias']
  return x


class NetworksTest(unittest.TestCase):

  @parameterized.expand([(0,), (1,), (2,)])
  def test_forward_matches_nested_loops(self, seed):
    model = random_model(seed)
    image = np.random.default_rng(seed + 10).uniform(0, 255, INPUT_SHAPE[:2])
    expected = oracle_forward(SPECS, model.weights, image[..., np.newaxis])
    np.testing.assert_allclose(
        np.array(model.forward(image)), expected, rtol=1e-10, atol=1e-9)

  def test_predict_matches_forward(self):
    model = random_model()
    images = np.random.default_rng(3).uniform(0, 255, (4,) + INPUT_SHAPE[:2])
    batched = model.predict(images)
    for image, row in zip(images, batched):
      np.testing.assert_allclose(row, np.array(model.forward(image)), rtol=1e-9)

  def test_forward_is_deterministic(self):
    model = random_model()
    image = np.random.default_rng(4).uniform(0, 255, INPUT_SHAPE[:2])
    self.assertEqual(model.forward(image), model.forward(image))

  def test_input_gradient_matches_finite_differences(self):
    model = random_model(5)
    rng = np.random.default_rng(6)
    image = rng.uniform(0, 255, INPUT_SHAPE[:2])
    cotangent = rng.normal(size=networks.OUTPUT_DIM)
    gradient = model.input_gradient(image, cotangent)
    self.assertEqual(gradient.shape, image.shape)

    h = 1e-4
    for _ in range(10):
      i, j = rng.integers(INPUT_SHAPE[0]), rng.integers(INPUT_SHAPE[1])
      plus, minus = image.copy(), image.copy()
      plus[i, j] += h
      minus[i, j] -= h
      numeric = (
          np.dot(cotangent, model.forward(plus)) -
          np.dot(cotangent, model.forward(minus))) / (2 * h)
      np.testing.assert_allclose(gradient[i, j], numeric, rtol=1e-5, atol=1e-7)

  def test_zero_cotangent_gives_zero_gradient(self):
    model = random_model()
    image = np.random.default_rng(7).uniform(0, 255, INPUT_SHAPE[:2])
    gradient = model.input_gradient(image, np.zeros(networks.OUTPUT_DIM))
    np.testing.assert_array_equal(gradient, 0)

  def test_input_gradient_is_linear_in_cotangent(self):
    model = random_model(8)
    rng = np.random.default_rng(9)
    image = rng.uniform(0, 255, INPUT_SHAPE[:2])
    u, v = rng.normal(size=(2, networks.OUTPUT_DIM))
    a, b = 2.5, -0.75
    combined = model.input_gradient(image, a * u + b * v)
    separate = a * model.input_gradient(image, u) + b * model.input_gradient(image, v)
    scale = max(1., np.abs(separate).max())
    np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-10 * scale)

  def test_relu_gradient_is_zero_at_zero(self):
    specs = [
        networks.conv2d(1, 1), networks.RELU, networks.FLATTEN,
        networks.fully_connected(4)]
    weights = [
        dict(kernel=np.ones((1, 1, 1, 1)), bias=np.array([-1.])),
        {}, {},
        dict(kernel=np.eye(4), bias=np.zeros(4)),
    ]
    model = networks.VictimModel(specs, weights, (2, 2, 1))
    # Pre-activations are [[0, 1], [-0.5, 0]].
    image = np.array([[1., 2.], [0.5, 1.]])
    gradient = model.input_gradient(image, np.ones(4))
    np.testing.assert_array_equal(gradient, [[0., 1.], [0., 0.]])

  def test_tiny_frontnet_golden_forward(self):
    specs = synth.tiny_frontnet_specs()
    input_shape = (96, 160, 1)
    weights = []
    shape = input_shape
    for i, spec in enumerate(specs):
      layer = {
          name: np.zeros(s)
          for name, s in networks.weight_shapes(spec, shape).items()}
      if spec.kind is networks.LayerKind.CONV2D:
        # Copies channel 0 through unchanged.
        center = spec.kernel // 2
        layer['kernel'][center, center, 0, 0] = 1.
      weights.append(layer)
      shape = networks.output_shape(spec, shape, i)
    self.assertEqual(shape, (networks.OUTPUT_DIM,))

    # Flattened features are [12, 20, 4] in row-major order.
    kernel = weights[-1]['kernel']
    kernel[0, 0] = 1.
    kernel[(11 * 20 + 19) * 4, 1] = 1.
    kernel[0::4, 2] = 1.
    weights[-1]['bias'][3] = 0.5
    model = networks.VictimModel(specs, weights, input_shape)

    rows, cols = np.mgrid[0:96, 0:160]
    image = 1000. * rows + cols
    # Each feature is the bottom-right pixel of its 8x8 block.
    self.assertEqual(
        tuple(model.forward(image)), (7007., 95159., 12259920., 0.5))

  def test_maxpool_ties_route_to_first(self):
    specs = [networks.MAXPOOL, networks.FLATTEN, networks.fully_connected(4)]
    weights = [{}, {}, dict(kernel=np.eye(4), bias=np.zeros(4))]
    model = networks.VictimModel(specs, weights, (4, 4, 1))
    image = np.ones((4, 4))
    gradient = model.input_gradient(image, np.ones(4))
    expected = np.zeros((4, 4))
    expected[0::2, 0::2] = 1
    np.testing.assert_array_equal(gradient, expected)

  def test_wrong_image_shape(self):
    model = random_model()
    with self.assertRaises(errors.DimensionError):
      model.forward(np.zeros((9, 10)))

  def test_non_finite_image(self):
    model = random_model()
    image = np.zeros(INPUT_SHAPE[:2])
    image[0, 0] = np.nan
    with self.assertRaises(errors.NumericError):
      model.forward(image)

  def test_bad_cotangent_shape(self):
    model = random_model()
    with self.assertRaises(errors.DimensionError):
      model.input_gradient(np.zeros(INPUT_SHAPE[:2]), np.zeros(3))

  def test_weight_shape_mismatch(self):
    weights = random_weights(0)
    weights[0]['kernel'] = np.zeros((2, 2, 1, 3))
    with self.assertRaises(errors.DimensionError):
      networks.VictimModel(SPECS, weights, INPUT_SHAPE)

  def test_missing_weights(self):
    weights = random_weights(0)
    del weights[0]['bias']
    with self.assertRaises(errors.FormatError):
      networks.VictimModel(SPECS, weights, INPUT_SHAPE)

  def test_output_must_be_a_pose(self):
    specs = SPECS[:-1] + [networks.fully_connected(3)]
    with self.assertRaises(errors.DimensionError):
      networks.VictimModel(specs, random_weights(0, specs), INPUT_SHAPE)

  def test_fully_connected_needs_flatten(self):
    spec = networks.fully_connected(4)
    weights = {
        name: np.zeros(shape)
        for name, shape in networks.weight_shapes(spec, INPUT_SHAPE).items()}
    with self.assertRaises(errors.DimensionError):
      networks.VictimModel([spec], [weights], INPUT_SHAPE)

  def test_count_parameters(self):
    model = random_model()
    expected = sum(w.size for layer in random_weights(0) for w in layer.values())
    self.assertEqual(networks.count_parameters(model), expected)

  def test_weights_are_frozen(self):
    model = random_model()
    with self.assertRaises(ValueError):
      model.weights[0]['kernel'][0, 0, 0, 0] = 1.

if __name__ == '__main__':
  unittest.main(failfast=True)
