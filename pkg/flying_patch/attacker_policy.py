"""Maps optimized transforms to attacker positions with a pinhole camera.

Camera frame: x is depth along the optical axis, y points left and z up, all
in meters. A point (x, y, z) projects to pixel (u, v) = (cx - f y / x,
cy - f z / x), with u growing to the right and v downwards.
"""

import typing as tp

import numpy as np
import pandas as pd

from flying_patch import errors, types, utils
from flying_patch.types import TransformParams

if tp.TYPE_CHECKING:
  from flying_patch.strategies import TrialReport

DEFAULT_FOCAL = 160.
DEFAULT_PATCH_WIDTH_M = 0.2

# Ratio of on-image patch width to s * image width; the patch is square in
# normalized coordinates, so one unit of s spans the full image width.
ASPECT_FACTOR = 1.


class CameraIntrinsics(tp.NamedTuple):
  focal: float  # pixels
  cx: float  # principal point, pixels from the left edge
  cy: float  # principal point, pixels from the top edge
  height: int
  width: int

  @classmethod
  def centered(cls, shape: tp.Tuple[int, int], focal: float = DEFAULT_FOCAL):
    height, width = shape
    return cls(float(focal), width / 2, height / 2, int(height), int(width))

  def validate(self):
    if not self.focal > 0:
      raise errors.ParameterError(f'focal length must be > 0, got {self.focal}')
    if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
      raise errors.ParameterError(
          f'principal point ({self.cx}, {self.cy}) is outside the image')

  def project(self, x: float, y: float, z: float) -> tp.Tuple[float, float]:
    if not x > 0:
      raise errors.ParameterError(f'point must be in front of the camera, depth {x}')
    return self.cx - self.focal * y / x, self.cy - self.focal * z / x

  def unproject(self, u: float, v: float, depth: float) -> tp.Tuple[float, float]:
    """(y, z) of the point at `depth` that projects to pixel (u, v)."""
    return -(u - self.cx) * depth / self.focal, -(v - self.cy) * depth / self.focal


class AttackerSetpoint(tp.NamedTuple):
  x: float  # depth, meters
  y: float
  z: float
  patch_width_m: float


def transform_to_setpoint(
    params: TransformParams,
    intrinsics: CameraIntrinsics,
    patch_width_m: float = DEFAULT_PATCH_WIDTH_M,
) -> AttackerSetpoint:
  """Where the attacker must hover so the patch shows up under `params`.

  Depth is set by the horizontal extent s * W only. The placed patch is
  s * H pixels tall, so the printed patch has to be patch_width_m * H / W
  meters tall to match the vertical extent at the same depth.
  """
  params = TransformParams.from_array(params)
  intrinsics.validate()
  if not params.scale > 0:
    raise errors.ParameterError(f'scale must be > 0, got {params.scale}')
  if not patch_width_m > 0:
    raise errors.ParameterError(f'patch width must be > 0, got {patch_width_m}')

  width_px = params.scale * intrinsics.width * ASPECT_FACTOR
  depth = intrinsics.focal * patch_width_m / width_px

  u = (params.tx + 1.) * intrinsics.width / 2
  v = (params.ty + 1.) * intrinsics.height / 2
  y, z = intrinsics.unproject(u, v, depth)
  return AttackerSetpoint(depth, y, z, patch_width_m)


def printed_patch_height(
    intrinsics: CameraIntrinsics,
    patch_width_m: float = DEFAULT_PATCH_WIDTH_M,
) -> float:
  """Physical height whose projection matches the placed patch's s * H rows."""
  return patch_width_m * intrinsics.height / intrinsics.width


def setpoint_to_transform(
    setpoint: AttackerSetpoint,
    intrinsics: CameraIntrinsics,
) -> TransformParams:
  """Inverse of transform_to_setpoint: projects the patch back into the image."""
  u, v = intrinsics.project(setpoint.x, setpoint.y, setpoint.z)
  width_px = intrinsics.focal * setpoint.patch_width_m / setpoint.x
  scale = width_px / (intrinsics.width * ASPECT_FACTOR)
  tx = 2 * u / intrinsics.width - 1.
  ty = 2 * v / intrinsics.height - 1.
  return TransformParams(scale, 0., tx, ty)


def policy(
    current: tp.Optional[types.TargetPose],
    desired: tp.Sequence[float],
    report: 'TrialReport',
    intrinsics: tp.Optional[CameraIntrinsics] = None,
    patch_width_m: float = DEFAULT_PATCH_WIDTH_M,
) -> AttackerSetpoint:
  """Selects the trained transform for `desired` and converts it.

  Placements are treated as static: the current victim pose does not enter
  the mapping.
  """
  del current
  targets = types.targets_array(report.config['targets'])
  desired = np.asarray(desired, dtype=np.float64)
  matches = np.flatnonzero(np.all(targets == desired, axis=1))
  if len(matches) == 0:
    raise errors.TargetLookupError(desired.tolist(), targets.tolist())
  k = int(matches[0])

  if intrinsics is None:
    intrinsics = CameraIntrinsics.centered(report.image_shape)
  params = TransformParams.from_array(report.final_transforms[k])
  return transform_to_setpoint(params, intrinsics, patch_width_m)


def all_setpoints(
    report: 'TrialReport',
    intrinsics: tp.Optional[CameraIntrinsics] = None,
    patch_width_m: float = DEFAULT_PATCH_WIDTH_M,
) -> tp.List[AttackerSetpoint]:
  targets = report.config['targets']
  return [
      policy(None, target, report, intrinsics, patch_width_m)
      for target in targets
  ]


SETPOINT_COLUMNS = ['target_index', 'x', 'y', 'z', 'patch_width_m']


def setpoints_frame(setpoints: tp.Sequence[AttackerSetpoint]) -> pd.DataFrame:
  rows = [(k,) + tuple(setpoint) for k, setpoint in enumerate(setpoints)]
  return pd.DataFrame(rows, columns=SETPOINT_COLUMNS)


def setpoints_csv(setpoints: tp.Sequence[AttackerSetpoint]) -> str:
  return setpoints_frame(setpoints).to_csv(index=False, float_format='%.17g')


def write_setpoints(path, setpoints: tp.Sequence[AttackerSetpoint]):
  utils.write_text(path, setpoints_csv(setpoints))
