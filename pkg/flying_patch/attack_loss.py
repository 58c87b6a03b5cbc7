"""The multi-target attack objective and its gradients.

For every image C in a batch and every target k the patch is placed at a
perturbed copy of T_k, pixel noise is added, the result is clipped to
[0, 255] and fed to the victim. The loss is the Euclidean distance between
the target (x, y, z) and the first three prediction components, averaged
over images and summed over targets.

All noise is drawn on the host from a numpy Generator before the compiled
step runs, so the value and the gradient of one call see the same noise.
"""

import functools
import typing as tp

import numpy as np
import sonnet as snt
import tensorflow as tf

from flying_patch import errors, placement, tf_utils, types
from flying_patch.data import NoiseConfig, pixel_noise
from flying_patch.networks import VictimModel

# Smoothing of the Euclidean norm at zero error.
NORM_EPSILON = 1e-12

# Chunk size used when evaluating whole image sets.
EVAL_BATCH_SIZE = 64


class LossBreakdown(tp.NamedTuple):
  total: float
  per_target: np.ndarray  # [K], mean over images
  per_image: np.ndarray  # [B], sum over targets


class LossGradients(tp.NamedTuple):
  patch: np.ndarray  # [h, w]
  transforms: np.ndarray  # [K, 4], rotation column is zero when locked
  breakdown: LossBreakdown


class NoiseSample(tp.NamedTuple):
  transforms: np.ndarray  # [K, B, 4]
  pixels: np.ndarray  # [K, B, H, W]


def draw_noise(
    rng: tp.Optional[np.random.Generator],
    num_targets: int,
    batch_shape: tp.Tuple[int, int, int],
    noise: NoiseConfig,
    lock_rotation: bool = True,
) -> NoiseSample:
  """Per target: transform noise [B, 3 or 4], then pixel noise [B, H, W]."""
  batch_size = batch_shape[0]
  transform_noise = np.zeros((num_targets, batch_size, 4))
  pixels = np.zeros((num_targets,) + tuple(batch_shape))
  if not noise.enabled:
    return NoiseSample(transform_noise, pixels)
  if rng is None:
    raise errors.ConfigError('noise is enabled but no rng was given')

  for k in range(num_targets):
    transform_noise[k] = placement.transform_noise(
        rng, batch_size, noise.transform_std, lock_rotation)
    pixels[k] = pixel_noise(rng, batch_shape, noise.pixel_std)
  return NoiseSample(transform_noise, pixels)


class AttackObjective(snt.Module):
  """Compiled loss and loss gradient for one (model, targets) pair."""

  def __init__(
      self,
      model: VictimModel,
      targets: np.ndarray,
      constraints: placement.Constraints = placement.DEFAULT_CONSTRAINTS,
      name: str = 'AttackObjective',
  ):
    super().__init__(name=name)
    self.model = model
    self.targets = types.targets_array(targets)
    if len(self.targets) < 1:
      raise errors.ConfigError('at least one target is required')
    self.num_targets = len(self.targets)
    self.constraints = constraints
    self._targets = tf_utils.constant(self.targets)
    self._compiled_loss = tf.function(self._loss)
    self._compiled_loss_and_grad = tf.function(self._loss_and_grad)

  def _loss(self, images, patch, transforms, transform_noise=None, pixels=None):
    # Without noise arrays the graph skips the noise terms.
    instance_errors = []
    for k in range(self.num_targets):
      params = transforms[k]
      if transform_noise is not None:
        params = params + transform_noise[k]
      params = placement.project_tf(params, self.constraints)
      placed = placement.place_batch(images, patch, params)
      if pixels is not None:
        placed = placed + pixels[k]
      # Gradient passes where 0 <= x <= 255.
      clipped = tf.clip_by_value(placed, 0., 255.)
      predictions = self.model(clipped)
      difference = self._targets[k] - predictions[:, :3]
      instance_errors.append(tf.sqrt(
          tf.reduce_sum(tf.square(difference), axis=-1) + NORM_EPSILON))

    instance_errors = tf.stack(instance_errors)  # [K, B]
    per_target = tf.reduce_mean(instance_errors, axis=1)
    total = tf.reduce_sum(per_target)
    per_image = tf.reduce_sum(instance_errors, axis=0)
    return total, per_target, per_image

  def _loss_and_grad(self, images, patch, transforms, transform_noise=None, pixels=None):
    with tf.GradientTape() as tape:
      tape.watch([patch, transforms])
      total, per_target, per_image = self._loss(
          images, patch, transforms, transform_noise, pixels)
    patch_grad, transforms_grad = tape.gradient(
        total, [patch, transforms],
        unconnected_gradients=tf.UnconnectedGradients.ZERO)
    return (total, per_target, per_image), patch_grad, transforms_grad

  def _check(self, images, patch, transforms) -> tp.Tuple[np.ndarray, ...]:
    images = np.asarray(images, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    transforms = np.asarray(transforms, dtype=np.float64)

    image_shape = self.model.image_shape
    if images.ndim != 3 or images.shape[1:] != image_shape:
      raise errors.DimensionError(
          'images must be a batch matching the model input',
          expected=(None,) + image_shape, actual=images.shape)
    if len(images) == 0:
      raise errors.DimensionError('empty image batch')
    if patch.ndim != 2 or min(patch.shape) < 1:
      raise errors.DimensionError('patch must be a non-empty 2D grid', actual=patch.shape)
    if transforms.shape != (self.num_targets, 4):
      raise errors.ConfigError(
          f'{len(transforms)} transforms for {self.num_targets} targets')
    return images, patch, transforms

  def _inputs(self, images, patch, transforms, noise, rng) -> tuple:
    inputs = (
        tf_utils.constant(images),
        tf_utils.constant(patch),
        tf_utils.constant(transforms),
    )
    if not noise.enabled:
      return inputs
    sample = draw_noise(
        rng, self.num_targets, images.shape, noise,
        self.constraints.lock_rotation)
    return inputs + (
        tf_utils.constant(sample.transforms), tf_utils.constant(sample.pixels))

  def loss(
      self,
      images: np.ndarray,
      patch: np.ndarray,
      transforms: np.ndarray,
      noise: NoiseConfig,
      rng: tp.Optional[np.random.Generator] = None,
  ) -> LossBreakdown:
    images, patch, transforms = self._check(images, patch, transforms)
    total, per_target, per_image = self._compiled_loss(
        *self._inputs(images, patch, transforms, noise, rng))
    return LossBreakdown(float(total), per_target.numpy(), per_image.numpy())

  def loss_and_grad(
      self,
      images: np.ndarray,
      patch: np.ndarray,
      transforms: np.ndarray,
      noise: NoiseConfig,
      rng: tp.Optional[np.random.Generator] = None,
  ) -> LossGradients:
    images, patch, transforms = self._check(images, patch, transforms)
    (total, per_target, per_image), patch_grad, transforms_grad = (
        self._compiled_loss_and_grad(
            *self._inputs(images, patch, transforms, noise, rng)))
    breakdown = LossBreakdown(float(total), per_target.numpy(), per_image.numpy())
    return LossGradients(patch_grad.numpy(), transforms_grad.numpy(), breakdown)

  def evaluate(
      self,
      images: np.ndarray,
      patch: np.ndarray,
      transforms: np.ndarray,
      batch_size: int = EVAL_BATCH_SIZE,
  ) -> LossBreakdown:
    """Noise-free loss over a whole image set, chunked in a fixed order."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
      raise errors.DimensionError('cannot evaluate on an empty image set')
    off = NoiseConfig(enabled=False)
    per_target_sum = np.zeros(self.num_targets)
    per_image = []
    for start in range(0, len(images), batch_size):
      chunk = images[start:start + batch_size]
      breakdown = self.loss(chunk, patch, transforms, off)
      per_target_sum += breakdown.per_target * len(chunk)
      per_image.append(breakdown.per_image)
    per_target = per_target_sum / len(images)
    return LossBreakdown(
        float(np.sum(per_target)), per_target, np.concatenate(per_image))


@functools.lru_cache(maxsize=8)
def _cached_objective(model, targets_key, constraints) -> AttackObjective:
  targets = np.array(targets_key, dtype=np.float64)
  return AttackObjective(model, targets, constraints)


def get_objective(
    model: VictimModel,
    targets: tp.Sequence[tp.Sequence[float]],
    constraints: placement.Constraints = placement.DEFAULT_CONSTRAINTS,
) -> AttackObjective:
  """Shares compiled objectives between calls with the same arguments."""
  targets_key = tuple(map(tuple, types.targets_array(targets).tolist()))
  return _cached_objective(model, targets_key, constraints)


def attack_loss(
    model: VictimModel,
    images: np.ndarray,
    patch: np.ndarray,
    transforms: tp.Sequence,
    targets: tp.Sequence,
    noise: NoiseConfig,
    rng: tp.Optional[np.random.Generator] = None,
    constraints: placement.Constraints = placement.DEFAULT_CONSTRAINTS,
) -> LossBreakdown:
  transforms = types.transforms_array(transforms)
  targets = types.targets_array(targets)
  if len(transforms) != len(targets):
    raise errors.ConfigError(
        f'{len(transforms)} transforms for {len(targets)} targets')
  objective = get_objective(model, targets, constraints)
  return objective.loss(images, patch, transforms, noise, rng)


def attack_loss_grad(
    model: VictimModel,
    images: np.ndarray,
    patch: np.ndarray,
    transforms: tp.Sequence,
    targets: tp.Sequence,
    noise: NoiseConfig,
    rng: tp.Optional[np.random.Generator] = None,
    constraints: placement.Constraints = placement.DEFAULT_CONSTRAINTS,
) -> LossGradients:
  transforms = types.transforms_array(transforms)
  targets = types.targets_array(targets)
  if len(transforms) != len(targets):
    raise errors.ConfigError(
        f'{len(transforms)} transforms for {len(targets)} targets')
  objective = get_objective(model, targets, constraints)
  return objective.loss_and_grad(images, patch, transforms, noise, rng)


def evaluate(
    model: VictimModel,
    images: np.ndarray,
    patch: np.ndarray,
    transforms: tp.Sequence,
    targets: tp.Sequence,
    constraints: placement.Constraints = placement.DEFAULT_CONSTRAINTS,
) -> LossBreakdown:
  objective = get_objective(model, targets, constraints)
  return objective.evaluate(images, patch, types.transforms_array(transforms))


def baseline_loss(
    model: VictimModel,
    images: np.ndarray,
    targets: tp.Sequence,
    batch_size: int = EVAL_BATCH_SIZE,
) -> np.ndarray:
  """Per-target loss of the unmodified images."""
  targets = types.targets_array(targets)
  images = np.asarray(images, dtype=np.float64)
  sums = np.zeros(len(targets))
  for start in range(0, len(images), batch_size):
    predictions = model.predict(images[start:start + batch_size])[:, :3]
    difference = targets[:, np.newaxis, :] - predictions[np.newaxis]
    sums += np.sum(
        np.sqrt(np.sum(difference ** 2, axis=-1) + NORM_EPSILON), axis=1)
  return sums / len(images)
