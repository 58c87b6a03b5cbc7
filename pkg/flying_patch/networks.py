"""The frozen pose-estimation network under attack.

A VictimModel is a generic stack of frozen layers mapping a grayscale image
to a pose estimate (x, y, z, phi). Weights are never trained: only gradients
with respect to the input image are ever taken.

Layouts follow tensorflow conventions: images are [batch, height, width,
channels], conv kernels are [k, k, in_channels, out_channels], dense kernels
are [in_features, out_features] and flatten is row-major over
(height, width, channels).
"""

import enum
import typing as tp
from typing import NamedTuple, Sequence

import numpy as np
import sonnet as snt
import tensorflow as tf

from flying_patch import errors, tf_utils
from flying_patch.types import PoseEstimate

OUTPUT_DIM = 4

Shape = tp.Tuple[int, ...]
Weights = tp.Mapping[str, np.ndarray]


class LayerKind(enum.Enum):
  CONV2D = 'conv2d'
  RELU = 'relu'
  MAXPOOL = 'maxpool'
  FLATTEN = 'flatten'
  FULLY_CONNECTED = 'fully_connected'
  FROZEN_BATCHNORM = 'frozen_batchnorm'


class LayerSpec(NamedTuple):
  kind: LayerKind
  out_channels: int = 0  # conv2d
  kernel: int = 0  # conv2d
  stride: int = 1  # conv2d
  padding: int = 0  # conv2d
  out_features: int = 0  # fully_connected

  def describe(self, index: int) -> str:
    return f'layer {index} ({self.kind.value})'


# Names of the weight arrays each layer kind carries, in file order.
WEIGHT_NAMES = {
    LayerKind.CONV2D: ('kernel', 'bias'),
    LayerKind.RELU: (),
    LayerKind.MAXPOOL: (),
    LayerKind.FLATTEN: (),
    LayerKind.FULLY_CONNECTED: ('kernel', 'bias'),
    LayerKind.FROZEN_BATCHNORM: ('scale', 'shift'),
}


def conv2d(out_channels, kernel, stride=1, padding=0) -> LayerSpec:
  return LayerSpec(
      LayerKind.CONV2D, out_channels=out_channels, kernel=kernel,
      stride=stride, padding=padding)

def fully_connected(out_features) -> LayerSpec:
  return LayerSpec(LayerKind.FULLY_CONNECTED, out_features=out_features)

RELU = LayerSpec(LayerKind.RELU)
MAXPOOL = LayerSpec(LayerKind.MAXPOOL)
FLATTEN = LayerSpec(LayerKind.FLATTEN)
FROZEN_BATCHNORM = LayerSpec(LayerKind.FROZEN_BATCHNORM)


def weight_shapes(spec: LayerSpec, input_shape: Shape) -> dict[str, Shape]:
  """Expected weight shapes of a layer applied to `input_shape`."""
  kind = spec.kind
  if kind is LayerKind.CONV2D:
    cin = input_shape[-1]
    k = spec.kernel
    return dict(kernel=(k, k, cin, spec.out_channels), bias=(spec.out_channels,))
  if kind is LayerKind.FULLY_CONNECTED:
    return dict(
        kernel=(input_shape[0], spec.out_features), bias=(spec.out_features,))
  if kind is LayerKind.FROZEN_BATCHNORM:
    return dict(scale=(input_shape[-1],), shift=(input_shape[-1],))
  return {}


def check_hyperparameters(spec: LayerSpec, index: int):
  where = spec.describe(index)
  if spec.kind is LayerKind.CONV2D:
    if spec.kernel < 1 or spec.stride < 1:
      raise errors.FormatError(f'{where}: kernel and stride must be >= 1')
    if spec.padding < 0:
      raise errors.FormatError(f'{where}: padding must be >= 0')
    if spec.out_channels < 1:
      raise errors.FormatError(f'{where}: out_channels must be >= 1')
  if spec.kind is LayerKind.FULLY_CONNECTED and spec.out_features < 1:
    raise errors.FormatError(f'{where}: out_features must be >= 1')


def output_shape(spec: LayerSpec, input_shape: Shape, index: int = 0) -> Shape:
  where = spec.describe(index)
  kind = spec.kind
  spatial = len(input_shape) == 3

  if kind in (LayerKind.CONV2D, LayerKind.MAXPOOL) and not spatial:
    raise errors.DimensionError(
        f'{where} needs a spatial input', expected='(h, w, c)',
        actual=input_shape)
  if kind is LayerKind.FULLY_CONNECTED and spatial:
    raise errors.DimensionError(
        f'{where} needs a flat input, insert a flatten layer',
        expected='(n,)', actual=input_shape)

  if kind is LayerKind.CONV2D:
    h, w, _ = input_shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    out_h = (h + 2 * p - k) // s + 1
    out_w = (w + 2 * p - k) // s + 1
    if out_h < 1 or out_w < 1:
      raise errors.DimensionError(
          f'{where}: kernel larger than padded input',
          expected=f'at least ({k}, {k})', actual=(h + 2 * p, w + 2 * p))
    return (out_h, out_w, spec.out_channels)
  if kind is LayerKind.MAXPOOL:
    h, w, c = input_shape
    if h < 2 or w < 2:
      raise errors.DimensionError(
          f'{where}: input too small to pool', expected='at least (2, 2)',
          actual=(h, w))
    return (h // 2, w // 2, c)
  if kind is LayerKind.FLATTEN:
    return (int(np.prod(input_shape)),)
  if kind is LayerKind.FULLY_CONNECTED:
    return (spec.out_features,)
  return input_shape  # relu, frozen_batchnorm


def infer_shapes(
    input_shape: Shape,
    specs: Sequence[LayerSpec],
    weights: Sequence[Weights],
) -> list[Shape]:
  """Validates the shape chain; returns the output shape of every layer."""
  if len(specs) != len(weights):
    raise errors.FormatError(
        f'{len(specs)} layers but {len(weights)} weight groups')
  if len(input_shape) != 3 or min(input_shape) < 1:
    raise errors.DimensionError(
        'input shape must be (height, width, channels) with positive entries',
        actual=input_shape)

  shapes = []
  shape = tuple(input_shape)
  for index, (spec, layer_weights) in enumerate(zip(specs, weights)):
    check_hyperparameters(spec, index)
    expected = weight_shapes(spec, shape)
    if set(layer_weights) != set(expected):
      raise errors.FormatError(
          f'{spec.describe(index)}: expected weights {sorted(expected)}, '
          f'got {sorted(layer_weights)}')
    for name, expected_shape in expected.items():
      actual_shape = tuple(np.shape(layer_weights[name]))
      if actual_shape != expected_shape:
        raise errors.DimensionError(
            f'{spec.describe(index)}: {name} has the wrong shape',
            expected=expected_shape, actual=actual_shape)
    shape = output_shape(spec, shape, index)
    shapes.append(shape)

  if shape != (OUTPUT_DIM,):
    raise errors.DimensionError(
        'the network must output a pose', expected=(OUTPUT_DIM,), actual=shape)
  return shapes


class Conv2D(snt.Module):

  def __init__(self, kernel, bias, stride: int, padding: int, name=None):
    super().__init__(name=name)
    self.kernel = tf_utils.constant(kernel)
    self.bias = tf_utils.constant(bias)
    self.stride = stride
    self.padding = padding

  def __call__(self, inputs):
    if self.padding:
      p = self.padding
      inputs = tf.pad(inputs, [[0, 0], [p, p], [p, p], [0, 0]])
    outputs = tf.nn.conv2d(
        inputs, self.kernel, strides=self.stride, padding='VALID')
    return outputs + self.bias


class MaxPool2x2(snt.Module):
  """2x2 max-pooling with stride 2; odd trailing rows/columns are dropped.

  Ties are broken by the first maximum in row-major order within each
  window, which is also where the gradient is routed.
  """

  def __init__(self, name=None):
    super().__init__(name=name)

  def __call__(self, inputs):
    _, h, w, c = inputs.shape
    h2, w2 = h // 2, w // 2
    x = inputs[:, :2 * h2, :2 * w2, :]
    x = tf.reshape(x, [-1, h2, 2, w2, 2, c])
    # [B, h2, w2, c, 4] with window positions in row-major order
    x = tf.transpose(x, [0, 1, 3, 5, 2, 4])
    x = tf.reshape(x, [-1, h2, w2, c, 4])

    window_max = tf.reduce_max(x, axis=-1, keepdims=True)
    is_max = tf.cast(tf.equal(x, window_max), x.dtype)
    earlier_maxes = tf.cumsum(is_max, axis=-1, exclusive=True)
    first_max = is_max * tf.cast(tf.equal(earlier_maxes, 0), x.dtype)
    first_max = tf.stop_gradient(first_max)
    return tf.reduce_sum(x * first_max, axis=-1)


class Flatten(snt.Module):

  def __init__(self, name=None):
    super().__init__(name=name)

  def __call__(self, inputs):
    return tf.reshape(inputs, [tf.shape(inputs)[0], -1])


class FullyConnected(snt.Module):

  def __init__(self, kernel, bias, name=None):
    super().__init__(name=name)
    self.kernel = tf_utils.constant(kernel)
    self.bias = tf_utils.constant(bias)

  def __call__(self, inputs):
    return tf.matmul(inputs, self.kernel) + self.bias


class FrozenBatchNorm(snt.Module):
  """Per-channel affine map folded from trained batch-norm statistics."""

  def __init__(self, scale, shift, name=None):
    super().__init__(name=name)
    self.scale = tf_utils.constant(scale)
    self.shift = tf_utils.constant(shift)

  def __call__(self, inputs):
    return inputs * self.scale + self.shift


def build_layer(spec: LayerSpec, weights: Weights, index: int) -> tp.Callable:
  name = f'{spec.kind.value}_{index}'
  kind = spec.kind
  if kind is LayerKind.CONV2D:
    return Conv2D(
        weights['kernel'], weights['bias'], spec.stride, spec.padding, name=name)
  if kind is LayerKind.RELU:
    return tf.nn.relu
  if kind is LayerKind.MAXPOOL:
    return MaxPool2x2(name=name)
  if kind is LayerKind.FLATTEN:
    return Flatten(name=name)
  if kind is LayerKind.FULLY_CONNECTED:
    return FullyConnected(weights['kernel'], weights['bias'], name=name)
  if kind is LayerKind.FROZEN_BATCHNORM:
    return FrozenBatchNorm(weights['scale'], weights['shift'], name=name)
  raise errors.FormatError(f'unknown layer kind {kind}')


def _freeze(x) -> np.ndarray:
  x = np.array(x, dtype=np.float64)
  x.setflags(write=False)
  return x


class VictimModel(snt.Module):
  """A frozen layer stack f(image) -> (x, y, z, phi)."""

  def __init__(
      self,
      specs: Sequence[LayerSpec],
      weights: Sequence[Weights],
      input_shape: Shape,
      name: str = 'VictimModel',
  ):
    super().__init__(name=name)
    self.specs = tuple(specs)
    self.weights = tuple(
        {k: _freeze(v) for k, v in layer_weights.items()}
        for layer_weights in weights)
    self.input_shape = tuple(int(d) for d in input_shape)
    self.output_dim = OUTPUT_DIM
    self.shapes = infer_shapes(self.input_shape, self.specs, self.weights)
    self._layers = [
        build_layer(spec, layer_weights, i)
        for i, (spec, layer_weights) in enumerate(zip(self.specs, self.weights))
    ]
    self._compiled_call = tf.function(self.__call__)
    self._compiled_vjp = tf.function(self._vjp)

  @property
  def image_shape(self) -> tuple[int, int]:
    return self.input_shape[:2]

  def __call__(self, images: tf.Tensor) -> tf.Tensor:
    """[B, H, W] or [B, H, W, C] -> [B, 4]."""
    if images.shape.rank == 3:
      images = images[..., tf.newaxis]
    x = images
    for layer in self._layers:
      x = layer(x)
    return x

  def _vjp(self, images: tf.Tensor, cotangents: tf.Tensor) -> tf.Tensor:
    with tf.GradientTape() as tape:
      tape.watch(images)
      outputs = self(images)
    return tape.gradient(outputs, images, output_gradients=cotangents)

  def _check_image(self, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    h, w, c = self.input_shape
    allowed = [(h, w, c)] + ([(h, w)] if c == 1 else [])
    if image.shape not in allowed:
      raise errors.DimensionError(
          'image does not match the model input', expected=allowed[0],
          actual=image.shape)
    if not np.all(np.isfinite(image)):
      raise errors.NumericError('image contains non-finite pixels')
    return image

  def predict(self, images: np.ndarray) -> np.ndarray:
    """Batched forward pass on host arrays, [B, H, W(, C)] -> [B, 4]."""
    images = np.asarray(images, dtype=np.float64)
    return self._compiled_call(tf_utils.constant(images)).numpy()

  def forward(self, image: np.ndarray) -> PoseEstimate:
    image = self._check_image(image)
    output = self.predict(image[np.newaxis])[0]
    return PoseEstimate(*(float(v) for v in output))

  def input_gradient(
      self,
      image: np.ndarray,
      output_cotangent: Sequence[float],
  ) -> np.ndarray:
    """d(cotangent . f(image)) / d(image), shaped like the image."""
    image = self._check_image(image)
    cotangent = np.asarray(output_cotangent, dtype=np.float64)
    if cotangent.shape != (OUTPUT_DIM,):
      raise errors.DimensionError(
          'output cotangent must be a pose vector',
          expected=(OUTPUT_DIM,), actual=cotangent.shape)
    if not np.all(np.isfinite(cotangent)):
      raise errors.NumericError('output cotangent contains non-finite values')
    gradient = self._compiled_vjp(
        tf_utils.constant(image[np.newaxis]),
        tf_utils.constant(cotangent[np.newaxis]))
    return gradient.numpy()[0]


def load_model(path) -> VictimModel:
  from flying_patch import saving
  return saving.load_model(path)


def forward(model: VictimModel, image: np.ndarray) -> PoseEstimate:
  return model.forward(image)


def input_gradient(
    model: VictimModel,
    image: np.ndarray,
    output_cotangent: Sequence[float],
) -> np.ndarray:
  return model.input_gradient(image, output_cotangent)


def count_parameters(model: VictimModel) -> int:
  return sum(w.size for layer in model.weights for w in layer.values())

