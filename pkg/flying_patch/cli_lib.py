"""Shared command-line plumbing for the scripts."""

import functools
import typing as tp

from absl import flags
from absl import logging
import fancyflags as ff
import wandb

from flying_patch import errors, flag_utils, tf_utils, train_lib

CONFIG_PATH = flags.DEFINE_string(
    'config', None, 'JSON config file; a trial report.json also works.')
OUT = flags.DEFINE_string('out', None, 'Output directory.')
SEED = flags.DEFINE_integer('seed', None, 'Overrides the base seed.')
WORKERS = flags.DEFINE_integer('workers', None, 'Trials run in parallel.')
STRATEGY = flags.DEFINE_string(
    'strategy', None, 'Strategy, or comma-separated strategies, to run.')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

EXIT_CODES: tp.Sequence[tp.Tuple[tp.Tuple[type, ...], int]] = (
    ((errors.ConfigError, errors.ParameterError, errors.TargetLookupError),
     EXIT_CONFIG),
    ((errors.FormatError, OSError), EXIT_IO),
    ((errors.DimensionError, errors.NumericError), EXIT_NUMERIC),
)


def exit_code(error: BaseException) -> int:
  for types, code in EXIT_CODES:
    if isinstance(error, types):
      return code
  return EXIT_FAILURE


def run_main(main: tp.Callable[[tp.List[str]], tp.Optional[int]]):
  """Wraps a script main so failures become exit codes for app.run."""

  @functools.wraps(main)
  def wrapped(argv):
    tf_utils.enable_determinism()
    try:
      main(argv)
    except Exception as e:
      code = exit_code(e)
      if code == EXIT_FAILURE:
        logging.exception('unexpected failure')
      else:
        logging.error(f'{type(e).__name__}: {e}')
      return code
    return EXIT_OK

  return wrapped


def define_wandb(group: str) -> flags.FlagHolder:
  # passed to wandb.init
  return ff.DEFINE_dict(
      'wandb',
      project=ff.String('flying-patch'),
      mode=ff.Enum('disabled', ['online', 'offline', 'disabled']),
      group=ff.String(group),
      name=ff.String(None),
      notes=ff.String(None),
      dir=ff.String(None, 'directory to save logs'),
  )


def init_wandb(wandb_flags: flags.FlagHolder, config, tag: tp.Optional[str] = None):
  wandb_kwargs = dict(wandb_flags.value)
  if tag:
    wandb_kwargs['name'] = tag
  wandb.init(config=flag_utils.to_dict(config), **wandb_kwargs)


def shortcut_overrides() -> dict:
  """The --out/--seed/--workers/--strategy flags as train config overrides."""
  overrides = {}
  if OUT.value is not None:
    overrides['expt_dir'] = OUT.value
  if SEED.value is not None:
    overrides['base_seed'] = SEED.value
  if WORKERS.value is not None:
    overrides['workers'] = WORKERS.value
  if STRATEGY.value is not None:
    overrides['strategies'] = STRATEGY.value
  return overrides


def load_train_config(prefix: str = 'run') -> train_lib.Config:
  """Config file, then explicitly given --{prefix}.* flags, then shortcuts."""
  overrides = flag_utils.merge(
      flag_utils.overrides_from_flags(prefix), shortcut_overrides())
  return train_lib.load_config(CONFIG_PATH.value, overrides)


def load_config(cls: tp.Type[flag_utils.T], prefix: str, nested: tp.Optional[str] = None):
  """Like load_train_config for configs embedding a train config as `nested`."""
  overrides = flag_utils.overrides_from_flags(prefix)
  if nested is not None:
    shortcuts = shortcut_overrides()
    if shortcuts:
      overrides = flag_utils.merge(overrides, {nested: shortcuts})
  nest = flag_utils.read_config_file(CONFIG_PATH.value) if CONFIG_PATH.value else {}
  if nested is not None and nested in nest:
    nest[nested] = train_lib.upgrade_config(nest[nested])
  return flag_utils.dataclass_from_dict(cls, flag_utils.merge(nest, overrides))
