"""Small value types shared across modules.

We define NamedTuples for python typechecking and IDE integration; they are
immutable and safe to hand between worker threads.
"""

from typing import NamedTuple, Sequence

import numpy as np

from flying_patch import errors

# Images and patches are float64 arrays of shape [height, width] with values
# in [0, 255]; batches of images have shape [batch, height, width].


class PoseEstimate(NamedTuple):
  x: float  # depth, meters
  y: float  # horizontal, meters
  z: float  # vertical, meters
  phi: float  # orientation, radians

  def to_array(self) -> np.ndarray:
    return np.array(self, dtype=np.float64)


class TargetPose(NamedTuple):
  x: float
  y: float
  z: float

  def to_array(self) -> np.ndarray:
    return np.array(self, dtype=np.float64)


class TransformParams(NamedTuple):
  """Placement of a patch: scale, rotation (radians) and normalized translation.

  Normalized image coordinates put (-1, -1) at the top-left corner and (1, 1)
  at the bottom-right corner.
  """
  scale: float
  rotation: float = 0.
  tx: float = 0.
  ty: float = 0.

  def to_array(self) -> np.ndarray:
    return np.array(self, dtype=np.float64)

  @classmethod
  def from_array(cls, values: Sequence[float]) -> 'TransformParams':
    s, a, tx, ty = (float(v) for v in values)
    return cls(s, a, tx, ty)


def targets_array(targets: Sequence[Sequence[float]]) -> np.ndarray:
  targets = np.asarray(targets, dtype=np.float64)
  if targets.ndim != 2 or targets.shape[1] != 3:
    raise errors.ConfigError(
        f'targets must be a list of 3-vectors, got shape {targets.shape}')
  return targets


def transforms_array(transforms: Sequence) -> np.ndarray:
  return np.stack([np.asarray(t, dtype=np.float64) for t in transforms])
