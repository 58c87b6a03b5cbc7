"""Prints the attacker setpoint for each target of a trained trial."""

import os

from absl import app
from absl import flags
from absl import logging

from flying_patch import attacker_policy
from flying_patch import cli_lib
from flying_patch import errors
from flying_patch import strategies

TRIAL_DIR = flags.DEFINE_string('trial_dir', None, 'Trial directory from train.py.')
FOCAL = flags.DEFINE_float(
    'focal', attacker_policy.DEFAULT_FOCAL, 'Camera focal length in pixels.')
PATCH_WIDTH = flags.DEFINE_float(
    'patch_width', attacker_policy.DEFAULT_PATCH_WIDTH_M,
    'Physical patch width in meters.')


def main(_):
  if not TRIAL_DIR.value:
    raise errors.ConfigError('--trial_dir is required')
  report = strategies.load_report(TRIAL_DIR.value)
  intrinsics = attacker_policy.CameraIntrinsics.centered(
      report.image_shape, FOCAL.value)
  setpoints = attacker_policy.all_setpoints(report, intrinsics, PATCH_WIDTH.value)
  height = attacker_policy.printed_patch_height(intrinsics, PATCH_WIDTH.value)
  logging.info(f'print the patch {PATCH_WIDTH.value:.3f} m wide, {height:.3f} m tall')
  if cli_lib.OUT.value:
    attacker_policy.write_setpoints(
        os.path.join(cli_lib.OUT.value, 'setpoints.csv'), setpoints)
  print(attacker_policy.setpoints_csv(setpoints), end='')

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
