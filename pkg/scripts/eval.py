"""Evaluates a trained patch against base-image, white and initial patches.

Either point --eval.trial_dir at a trial directory written by train.py, or
give the patch, transforms and model files explicitly.
"""

import os

from absl import app
from absl import flags
import fancyflags as ff

from flying_patch import cli_lib
from flying_patch import eval_lib
from flying_patch import flag_utils

EVAL = ff.DEFINE_dict(
    'eval', **flag_utils.get_flags_from_dataclass(eval_lib.EvalConfig))
CSV_NAME = flags.DEFINE_string('csv_name', 'eval.csv', 'File name in --out.')


def main(_):
  config = cli_lib.load_config(eval_lib.EvalConfig, 'eval')
  out_dir = cli_lib.OUT.value or config.trial_dir
  out = os.path.join(out_dir, CSV_NAME.value) if out_dir else None
  frame = eval_lib.evaluate(config, out)
  if out is None:
    print(frame.to_string(index=False))

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
