"""Runs the configured strategies and trials; see train_lib.Config."""

from absl import app
import fancyflags as ff

from flying_patch import cli_lib
from flying_patch import flag_utils
from flying_patch import train_lib

RUN = ff.DEFINE_dict(
    'run', **flag_utils.get_flags_from_dataclass(train_lib.Config))

WANDB = cli_lib.define_wandb('attack')


def main(_):
  config = cli_lib.load_train_config('run')
  cli_lib.init_wandb(WANDB, config, config.tag)
  train_lib.train(config)

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
