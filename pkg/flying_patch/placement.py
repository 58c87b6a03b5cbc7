"""Differentiable placement of a patch into an image.

A transform T = [[s cos a, -s sin a, tx], [s sin a, s cos a, ty], [0, 0, 1]]
maps normalized patch coordinates to normalized image coordinates, where
(-1, -1) is the top-left corner and (1, 1) the bottom-right corner of the
respective pixel grid. Output pixel centers are pulled back through T^-1 and
the patch is sampled bilinearly with zero padding. The mask is the same
sampling applied to an all-ones canvas, so patch edges are soft.

The tensorflow functions operate on batches of transforms [B, 4] laid out
as (scale, rotation, tx, ty); the numpy-facing functions wrap them for a
single image.
"""

import typing as tp

import numpy as np
import tensorflow as tf

from flying_patch import errors, tf_utils
from flying_patch.types import TransformParams

DTYPE = tf_utils.DTYPE

# place() refuses scales below this.
MIN_SCALE = 1e-6

ParamsLike = tp.Union[TransformParams, tp.Sequence[float], np.ndarray]


class Constraints(tp.NamedTuple):
  scale_min: float = 0.3
  scale_max: float = 0.5
  # Translations are kept in [-1 + margin, 1 - margin].
  margin: float = 1e-4
  lock_rotation: bool = True

DEFAULT_CONSTRAINTS = Constraints()


def _as_array(params: ParamsLike) -> np.ndarray:
  values = np.asarray(params, dtype=np.float64)
  if values.shape != (4,):
    raise errors.DimensionError(
        'transform params are (scale, rotation, tx, ty)',
        expected=(4,), actual=values.shape)
  return values


def build_affine(params: ParamsLike) -> np.ndarray:
  s, a, tx, ty = _as_array(params)
  if not s > 0:
    raise errors.ParameterError(f'scale must be > 0, got {s}')
  c, sn = np.cos(a), np.sin(a)
  return np.array([
      [s * c, -s * sn, tx],
      [s * sn, s * c, ty],
      [0., 0., 1.],
  ])


def invert_affine(matrix: np.ndarray) -> np.ndarray:
  matrix = np.asarray(matrix, dtype=np.float64)
  if matrix.shape != (3, 3):
    raise errors.DimensionError('affine matrix must be 3x3', actual=matrix.shape)
  a = matrix[:2, :2]
  det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
  if abs(det) < MIN_SCALE ** 2:
    raise errors.ParameterError(f'affine matrix is degenerate (det={det})')
  a_inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
  inverse = np.eye(3)
  inverse[:2, :2] = a_inv
  inverse[:2, 2] = -a_inv @ matrix[:2, 2]
  return inverse


## Tensorflow core

def normalized_centers(n: int) -> tf.Tensor:
  """Normalized coordinates of the n pixel centers along one axis."""
  return (2. * tf.range(n, dtype=DTYPE) + 1.) / n - 1.


def sample_coordinates(
    params: tf.Tensor,
    patch_shape: tp.Tuple[int, int],
    image_shape: tp.Tuple[int, int],
) -> tp.Tuple[tf.Tensor, tf.Tensor]:
  """Patch pixel coordinates (u, v) of every output pixel, each [B, H, W]."""
  height, width = image_shape
  h, w = patch_shape
  s, a, tx, ty = [
      tf.reshape(c, [-1, 1, 1]) for c in tf.unstack(params, num=4, axis=-1)]

  dx = normalized_centers(width)[tf.newaxis, tf.newaxis, :] - tx
  dy = normalized_centers(height)[tf.newaxis, :, tf.newaxis] - ty
  cos, sin = tf.cos(a), tf.sin(a)
  # R(-a) (q - t) / s
  px = (cos * dx + sin * dy) / s
  py = (cos * dy - sin * dx) / s

  u = ((px + 1.) * w - 1.) / 2.
  v = ((py + 1.) * h - 1.) / 2.
  return u, v


class Corner(tp.NamedTuple):
  index: tf.Tensor  # flat patch index, clipped into the patch
  weight: tf.Tensor  # bilinear weight
  valid: tf.Tensor  # whether the neighbor lies inside the patch


def corners(
    u: tf.Tensor,
    v: tf.Tensor,
    patch_shape: tp.Tuple[int, int],
) -> tp.List[Corner]:
  """The four bilinear neighbors of every sample point."""
  h, w = patch_shape
  u0 = tf.floor(u)
  v0 = tf.floor(v)
  fu = u - u0
  fv = v - v0
  u0 = tf.cast(u0, tf.int32)
  v0 = tf.cast(v0, tf.int32)

  result = []
  for dv, weight_v in ((0, 1. - fv), (1, fv)):
    for du, weight_u in ((0, 1. - fu), (1, fu)):
      ui = u0 + du
      vi = v0 + dv
      valid = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
      index = tf.clip_by_value(vi, 0, h - 1) * w + tf.clip_by_value(ui, 0, w - 1)
      result.append(Corner(index, weight_v * weight_u, valid))
  return result


def interpolate(patch: tf.Tensor, neighbors: tp.Sequence[Corner]) -> tf.Tensor:
  """Bilinear samples of the patch; out-of-bounds neighbors contribute zero."""
  flat = tf.reshape(patch, [-1])
  sampled = tf.zeros_like(neighbors[0].weight)
  for corner in neighbors:
    values = corner.weight * tf.gather(flat, corner.index)
    sampled += tf.where(corner.valid, values, tf.zeros_like(values))
  return sampled


def coverage(neighbors: tp.Sequence[Corner]) -> tf.Tensor:
  """interpolate() of an all-ones patch."""
  mask = tf.zeros_like(neighbors[0].weight)
  for corner in neighbors:
    mask += tf.where(corner.valid, corner.weight, tf.zeros_like(corner.weight))
  return mask


def warp(
    patch: tf.Tensor,
    params: tf.Tensor,
    image_shape: tp.Tuple[int, int],
) -> tp.Tuple[tf.Tensor, tf.Tensor]:
  """Returns (warped_patch, mask), each [B, H, W]."""
  u, v = sample_coordinates(params, patch.shape, image_shape)
  neighbors = corners(u, v, patch.shape)
  return interpolate(patch, neighbors), coverage(neighbors)


def composite(base: tf.Tensor, warped: tf.Tensor, mask: tf.Tensor) -> tf.Tensor:
  # Equal to (1 - mask) * base + mask * warped, and exactly base where mask = 0.
  return base + mask * (warped - base)


def place_batch(base: tf.Tensor, patch: tf.Tensor, params: tf.Tensor) -> tf.Tensor:
  """Composites one patch into images base [B, H, W] under params [B, 4]."""
  warped, mask = warp(patch, params, base.shape[1:3])
  return composite(base, warped, mask)


def project_tf(params: tf.Tensor, constraints: Constraints) -> tf.Tensor:
  """Projection onto the constraint box; gradients pass where not clipped."""
  s, a, tx, ty = tf.unstack(params, axis=-1)
  lo = -1. + constraints.margin
  hi = 1. - constraints.margin
  s = tf.clip_by_value(s, constraints.scale_min, constraints.scale_max)
  tx = tf.clip_by_value(tx, lo, hi)
  ty = tf.clip_by_value(ty, lo, hi)
  if constraints.lock_rotation:
    a = tf.zeros_like(a)
  return tf.stack([s, a, tx, ty], axis=-1)


## Numpy-facing API

class PlacementResult(tp.NamedTuple):
  composite: np.ndarray  # [H, W]
  mask: np.ndarray  # [H, W], in [0, 1]
  warped: np.ndarray  # [H, W], zero-padded bilinear samples of the patch
  # Patch pixel coordinates each output pixel was sampled at.
  sample_u: np.ndarray
  sample_v: np.ndarray
  base: np.ndarray
  patch: np.ndarray
  params: np.ndarray  # (scale, rotation, tx, ty)


def _check_inputs(base, patch, params) -> tp.Tuple[np.ndarray, ...]:
  base = np.asarray(base, dtype=np.float64)
  patch = np.asarray(patch, dtype=np.float64)
  if base.ndim != 2:
    raise errors.DimensionError('base image must be 2D', actual=base.shape)
  if patch.ndim != 2 or min(patch.shape) < 1:
    raise errors.DimensionError('patch must be a non-empty 2D grid', actual=patch.shape)
  params = _as_array(params)
  if not params[0] >= MIN_SCALE:
    raise errors.ParameterError(
        f'degenerate transform: scale {params[0]} is below {MIN_SCALE}')
  return base, patch, params


def place(base: np.ndarray, patch: np.ndarray, params: ParamsLike) -> PlacementResult:
  base, patch, params = _check_inputs(base, patch, params)
  params_t = tf_utils.constant(params[np.newaxis])
  patch_t = tf_utils.constant(patch)

  u, v = sample_coordinates(params_t, patch.shape, base.shape)
  neighbors = corners(u, v, patch.shape)
  warped = interpolate(patch_t, neighbors)
  mask = coverage(neighbors)
  result = composite(tf_utils.constant(base[np.newaxis]), warped, mask)

  return PlacementResult(
      composite=result.numpy()[0],
      mask=mask.numpy()[0],
      warped=warped.numpy()[0],
      sample_u=u.numpy()[0],
      sample_v=v.numpy()[0],
      base=base,
      patch=patch,
      params=params,
  )


def place_backward(
    result: PlacementResult,
    cotangent: np.ndarray,
) -> tp.Tuple[np.ndarray, np.ndarray]:
  """Gradients of <cotangent, composite> w.r.t. the patch and (s, a, tx, ty)."""
  cotangent = np.asarray(cotangent, dtype=np.float64)
  if cotangent.shape != result.base.shape:
    raise errors.DimensionError(
        'cotangent must match the base image', expected=result.base.shape,
        actual=cotangent.shape)
  if not np.all(np.isfinite(cotangent)):
    raise errors.NumericError('cotangent contains non-finite values')

  base = tf_utils.constant(result.base[np.newaxis])
  fn = lambda patch, params: place_batch(base, patch, params)
  patch_grad, params_grad = tf_utils.vjp(
      fn,
      [tf_utils.constant(result.patch), tf_utils.constant(result.params[np.newaxis])],
      tf_utils.constant(cotangent[np.newaxis]))
  return patch_grad.numpy(), params_grad.numpy()[0]


def project_array(
    params: np.ndarray,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
) -> np.ndarray:
  """Vectorized projection of [..., 4] parameter arrays."""
  params = np.array(params, dtype=np.float64)
  lo = -1. + constraints.margin
  hi = 1. - constraints.margin
  params[..., 0] = np.clip(params[..., 0], constraints.scale_min, constraints.scale_max)
  params[..., 2:] = np.clip(params[..., 2:], lo, hi)
  if constraints.lock_rotation:
    params[..., 1] = 0.
  return params


def project_params(
    params: ParamsLike,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
) -> TransformParams:
  return TransformParams.from_array(project_array(_as_array(params), constraints))


def transform_noise(
    rng: np.random.Generator,
    batch_size: int,
    std: float,
    lock_rotation: bool = True,
) -> np.ndarray:
  """Gaussian noise [B, 4] for (s, a, tx, ty).

  Draws B x 3 values for (s, tx, ty), or B x 4 with the rotation last when it
  is not locked.
  """
  noise = np.zeros((batch_size, 4))
  if lock_rotation:
    draws = rng.normal(0., std, size=(batch_size, 3))
    noise[:, [0, 2, 3]] = draws
  else:
    draws = rng.normal(0., std, size=(batch_size, 4))
    noise[:, [0, 2, 3, 1]] = draws
  return noise


def perturb_params(
    params: ParamsLike,
    rng: np.random.Generator,
    std: float = 0.1,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
) -> TransformParams:
  noise = transform_noise(rng, 1, std, constraints.lock_rotation)[0]
  return project_params(_as_array(params) + noise, constraints)


def random_transform(
    rng: np.random.Generator,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
) -> TransformParams:
  """Uniform over the constraint box with zero rotation."""
  s = rng.uniform(constraints.scale_min, constraints.scale_max)
  tx, ty = rng.uniform(-1. + constraints.margin, 1. - constraints.margin, size=2)
  return TransformParams(float(s), 0., float(tx), float(ty))
