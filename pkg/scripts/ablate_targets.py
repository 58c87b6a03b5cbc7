"""Loss against the number of targets, K = 1 .. --ablation.k_max."""

from absl import app
import fancyflags as ff

from flying_patch import ablation_lib
from flying_patch import cli_lib
from flying_patch import flag_utils

ABLATION = ff.DEFINE_dict(
    'ablation', **flag_utils.get_flags_from_dataclass(ablation_lib.AblationConfig))

WANDB = cli_lib.define_wandb('ablate_targets')


def main(_):
  config = cli_lib.load_config(ablation_lib.AblationConfig, 'ablation', nested='run')
  cli_lib.init_wandb(WANDB, config, config.run.tag)
  ablation_lib.run_target_ablation(config)

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
