import unittest
from parameterized import parameterized

import numpy as np
import tensorflow as tf

from flying_patch import errors, placement, tf_utils
from flying_patch.types import TransformParams

import fixtures

IMAGE_SHAPE = (12, 16)
PATCH_SHAPE = (5, 7)

def rasterize(base, patch, params):
  """Per-pixel reference placement via the explicit inverse matrix."""
  s, a, tx, ty = params
  matrix = np.array([
      [s * np.cos(a), -s * np.sin(a), tx],
      [s * np.sin(a), s * np.cos(a), ty],
      [0., 0., 1.],
  ])
  inverse = np.linalg.inv(matrix)
  height, width = base.shape
  h, w = patch.shape

  def pixel(array, row, col):
    if 0 <= row < array.shape[0] and 0 <= col < array.shape[1]:
      return array[row, col]
    return 0.

  def sample(array, u, v):
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    fu, fv = u - u0, v - v0
    return (
        (1 - fv) * (1 - fu) * pixel(array, v0, u0) +
        (1 - fv) * fu * pixel(array, v0, u0 + 1) +
        fv * (1 - fu) * pixel(array, v0 + 1, u0) +
        fv * fu * pixel(array, v0 + 1, u0 + 1))

  out = np.zeros_like(base)
  ones = np.ones_like(patch)
  for i in range(height):
    for j in range(width):
      q = np.array([(2 * j + 1) / width - 1, (2 * i + 1) / height - 1, 1.])
      px, py, _ = inverse @ q
      u = ((px + 1) * w - 1) / 2
      v = ((py + 1) * h - 1) / 2
      m = sample(ones, u, v)
      out[i, j] = (1 - m) * base[i, j] + m * sample(patch, u, v)
  return out

def random_instance(seed):
  rng = np.random.default_rng(seed)
  base = rng.uniform(0, 255, IMAGE_SHAPE)
  patch = rng.uniform(0, 255, PATCH_SHAPE)
  params = np.array([
      rng.uniform(0.3, 0.5), 0., rng.uniform(-0.99, 0.99), rng.uniform(-0.99, 0.99)])
  return base, patch, params


class PlacementTest(unittest.TestCase):

  @parameterized.expand([(seed,) for seed in range(100)])
  def test_matches_rasterizer(self, seed):
    base, patch, params = random_instance(seed)
    result = placement.place(base, patch, params)
    np.testing.assert_allclose(
        result.composite, rasterize(base, patch, params), rtol=0, atol=1e-12)

  def test_matches_rasterizer_with_rotation(self):
    base, patch, params = random_instance(100)
    params[1] = 0.7
    result = placement.place(base, patch, params)
    np.testing.assert_allclose(
        result.composite, rasterize(base, patch, params), rtol=0, atol=1e-9)

  def test_identity_reproduces_patch(self):
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 255, IMAGE_SHAPE)
    patch = rng.uniform(0, 255, IMAGE_SHAPE)
    identity = [1., 0., 0., 0.]
    result = placement.place(base, patch, identity)
    np.testing.assert_allclose(result.composite, patch, atol=1e-9)
    np.testing.assert_allclose(result.mask, 1., atol=1e-12)
    np.testing.assert_allclose(
        result.composite, rasterize(base, patch, identity), rtol=0, atol=1e-12)

  def test_off_image_leaves_base_untouched(self):
    base, patch, _ = random_instance(1)
    params = [0.3, 0., 5., 5.]
    result = placement.place(base, patch, params)
    np.testing.assert_array_equal(result.mask, 0.)
    np.testing.assert_array_equal(result.composite, base)
    np.testing.assert_allclose(
        result.composite, rasterize(base, patch, params), rtol=0, atol=1e-12)

  def test_compiled_matches_eager(self):
    rng = np.random.default_rng(7)
    base = tf_utils.constant(rng.uniform(0, 255, (3,) + IMAGE_SHAPE))
    patch = tf_utils.constant(rng.uniform(0, 255, PATCH_SHAPE))
    params = tf_utils.constant(np.array([
        placement.random_transform(rng) for _ in range(3)]))
    compiled = tf.function(
        placement.place_batch,
        input_signature=[
            tf.TensorSpec([None] + list(IMAGE_SHAPE), tf.float64),
            tf.TensorSpec(PATCH_SHAPE, tf.float64),
            tf.TensorSpec([None, 4], tf.float64),
        ])
    np.testing.assert_allclose(
        compiled(base, patch, params).numpy(),
        placement.place_batch(base, patch, params).numpy(), rtol=0, atol=1e-12)

  def test_mask_and_composite_ranges(self):
    for seed in range(5):
      base, patch, params = random_instance(seed)
      result = placement.place(base, patch, params)
      self.assertTrue(np.all(result.mask >= -1e-12))
      self.assertTrue(np.all(result.mask <= 1 + 1e-12))
      self.assertTrue(np.all(result.composite >= -1e-9))
      self.assertTrue(np.all(result.composite <= 255 + 1e-9))
      untouched = result.mask == 0
      np.testing.assert_array_equal(result.composite[untouched], base[untouched])

  def test_degenerate_scale(self):
    base, patch, _ = random_instance(0)
    with self.assertRaises(errors.ParameterError):
      placement.place(base, patch, [1e-9, 0., 0., 0.])

  def test_bad_shapes(self):
    base, patch, params = random_instance(0)
    with self.assertRaises(errors.DimensionError):
      placement.place(base[np.newaxis], patch, params)
    with self.assertRaises(errors.DimensionError):
      placement.place(base, patch, params[:3])

  def test_build_affine_layout(self):
    rng = np.random.default_rng(0)
    for _ in range(1000):
      s = rng.uniform(0.01, 2.)
      a = rng.uniform(-np.pi, np.pi)
      tx, ty = rng.uniform(-1, 1, size=2)
      matrix = placement.build_affine([s, a, tx, ty])
      expected = np.array([
          [s * np.cos(a), -s * np.sin(a), tx],
          [s * np.sin(a), s * np.cos(a), ty],
          [0., 0., 1.],
      ])
      np.testing.assert_array_equal(matrix, expected)

  def test_build_affine_rejects_nonpositive_scale(self):
    with self.assertRaises(errors.ParameterError):
      placement.build_affine([0., 0., 0., 0.])

  def test_invert_affine(self):
    matrix = placement.build_affine([0.4, 0.3, 0.2, -0.5])
    np.testing.assert_allclose(
        placement.invert_affine(matrix) @ matrix, np.eye(3), atol=1e-12)

  def test_backward_patch_gradient(self):
    base, patch, params = random_instance(2)
    result = placement.place(base, patch, params)
    cotangent = np.random.default_rng(3).normal(size=IMAGE_SHAPE)
    patch_grad, _ = placement.place_backward(result, cotangent)
    self.assertEqual(patch_grad.shape, PATCH_SHAPE)

    # The composite is linear in the patch, so differences are exact.
    f = lambda p: np.sum(cotangent * placement.place(base, p, params).composite)
    rng = np.random.default_rng(4)
    for _ in range(10):
      i, j = rng.integers(PATCH_SHAPE[0]), rng.integers(PATCH_SHAPE[1])
      plus, minus = patch.copy(), patch.copy()
      plus[i, j] += 1e-3
      minus[i, j] -= 1e-3
      numeric = (f(plus) - f(minus)) / 2e-3
      np.testing.assert_allclose(patch_grad[i, j], numeric, rtol=1e-6, atol=1e-8)

  def test_identity_backward_is_masked_cotangent(self):
    rng = np.random.default_rng(8)
    base = rng.uniform(0, 255, IMAGE_SHAPE)
    patch = rng.uniform(0, 255, IMAGE_SHAPE)
    result = placement.place(base, patch, [1., 0., 0., 0.])
    cotangent = rng.normal(size=IMAGE_SHAPE)
    patch_grad, _ = placement.place_backward(result, cotangent)
    np.testing.assert_allclose(
        patch_grad, cotangent * result.mask, rtol=0, atol=1e-12)

  @parameterized.expand([(seed,) for seed in range(20)])
  def test_backward_params_gradient(self, seed):
    base, patch, params = random_instance(seed + 50)
    params[1] = 0.2
    result = placement.place(base, patch, params)
    cotangent = np.random.default_rng(seed).normal(size=IMAGE_SHAPE)
    _, params_grad = placement.place_backward(result, cotangent)

    f = lambda p: np.sum(cotangent * placement.place(base, patch, p).composite)
    fixtures.check_gradient(self, f, params, params_grad, range(4), step=1e-5)

  def test_backward_rejects_bad_cotangent(self):
    base, patch, params = random_instance(0)
    result = placement.place(base, patch, params)
    with self.assertRaises(errors.DimensionError):
      placement.place_backward(result, np.zeros((3, 3)))
    cotangent = np.zeros(IMAGE_SHAPE)
    cotangent[0, 0] = np.inf
    with self.assertRaises(errors.NumericError):
      placement.place_backward(result, cotangent)

  def test_project_array(self):
    params = np.array([[0.1, 1.0, 2.0, -3.0], [0.4, 0.0, 0.5, 0.5]])
    projected = placement.project_array(params)
    np.testing.assert_array_equal(projected[0], [0.3, 0., 1 - 1e-4, -1 + 1e-4])
    np.testing.assert_array_equal(projected[1], params[1])
    # Idempotent.
    np.testing.assert_array_equal(placement.project_array(projected), projected)

  def test_project_keeps_rotation_when_unlocked(self):
    constraints = placement.Constraints(lock_rotation=False)
    projected = placement.project_params([0.4, 0.7, 0., 0.], constraints)
    self.assertEqual(projected, TransformParams(0.4, 0.7, 0., 0.))

  def test_transform_noise_layout(self):
    locked = placement.transform_noise(np.random.default_rng(0), 3, 0.1)
    np.testing.assert_array_equal(locked[:, 1], 0.)
    draws = np.random.default_rng(0).normal(0., 0.1, size=(3, 3))
    np.testing.assert_array_equal(locked[:, [0, 2, 3]], draws)

    unlocked = placement.transform_noise(np.random.default_rng(0), 3, 0.1, False)
    draws = np.random.default_rng(0).normal(0., 0.1, size=(3, 4))
    np.testing.assert_array_equal(unlocked[:, [0, 2, 3, 1]], draws)

  def test_perturbation_scale_noise_std(self):
    rng = np.random.default_rng(0)
    unbounded = placement.Constraints(scale_min=-np.inf, scale_max=np.inf)
    start = TransformParams(0.4, 0., 0., 0.)
    noise = np.array([
        placement.perturb_params(start, rng, 0.1, unbounded).scale - 0.4
        for _ in range(100_000)])
    self.assertAlmostEqual(noise.std(), 0.1, delta=0.003)

  def test_zero_std_perturbation_is_identity(self):
    params = TransformParams(0.4, 0., 0.2, -0.1)
    rng = np.random.default_rng(0)
    self.assertEqual(placement.perturb_params(params, rng, std=0.), params)

  def test_random_transform_scale_mean(self):
    rng = np.random.default_rng(0)
    scales = [placement.random_transform(rng).scale for _ in range(100_000)]
    self.assertAlmostEqual(np.mean(scales), 0.4, delta=0.005)

  def test_random_and_perturbed_transforms_stay_in_box(self):
    rng = np.random.default_rng(0)
    for _ in range(100):
      params = placement.random_transform(rng)
      perturbed = placement.perturb_params(params, rng, std=1.)
      for p in (params, perturbed):
        self.assertTrue(0.3 <= p.scale <= 0.5)
        self.assertEqual(p.rotation, 0.)
        self.assertLess(abs(p.tx), 1.)
        self.assertLess(abs(p.ty), 1.)

if __name__ == '__main__':
  unittest.main(failfast=True)
