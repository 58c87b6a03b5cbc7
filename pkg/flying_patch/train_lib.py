"""Run patch-attack experiments from a config and write their artifacts."""

import dataclasses
import datetime
import enum
import json
import os
import secrets
import typing as tp

from absl import logging
import numpy as np
import pandas as pd
import wandb

from flying_patch import (
    data as data_lib,
    errors,
    flag_utils,
    networks,
    saving,
    strategies,
    synth,
    types,
    utils,
)
from flying_patch.strategies import Strategy, TrialReport

VERSION = 1

SUMMARY_COLUMNS = [
    'strategy', 'trial', 'target_index', 'test_loss', 'train_loss_final',
    'wall_seconds',
]

# Targets of the two-target experiment.
DEFAULT_TARGETS = [[1., -1., 0.], [1., 1., 0.]]


def get_experiment_tag():
  today = datetime.date.today()
  return f'{today.year}-{today.month}-{today.day}_{secrets.token_hex(8)}'


def log_stats(stats: dict, step: tp.Optional[int] = None):
  """Forwards per-iteration stats to wandb when a run is active."""
  if wandb.run is None:
    return
  stats = dict(stats)
  prefix = f"{stats.pop('strategy', 'run')}/seed{stats.pop('seed', 0)}"
  wandb.log(data={f'{prefix}/{k}': v for k, v in stats.items()}, step=step)


T = tp.TypeVar('T')

def _field(default_factory: tp.Callable[[], T]) -> T:
  return dataclasses.field(default_factory=default_factory)


class PatchInit(enum.Enum):
  FILE = 'file'
  WHITE = 'white'
  RANDOM = 'random'
  FACE = 'face'


@dataclasses.dataclass
class PatchConfig:
  init: PatchInit = PatchInit.RANDOM
  path: tp.Optional[str] = None  # for init=file, .npy or .pgm
  seed: int = 0  # for init=random
  face_index: int = 1  # for init=face
  height: int = 40
  width: int = 40


@dataclasses.dataclass
class Config:
  dataset: data_lib.DatasetConfig = _field(data_lib.DatasetConfig)
  # None uses the benchmark model that matches the dataset config.
  model_path: tp.Optional[str] = None

  optimization: strategies.OptimizationConfig = _field(
      strategies.OptimizationConfig)
  # Comma-separated strategies to compare; overrides optimization.strategy.
  strategies: tp.Optional[str] = None
  noise: data_lib.NoiseConfig = _field(data_lib.NoiseConfig)
  patch: PatchConfig = _field(PatchConfig)

  # Only settable from config files.
  targets: list = _field(lambda: [list(t) for t in DEFAULT_TARGETS])

  trials: int = 10
  base_seed: int = 0
  # Trials run in parallel; None means os.cpu_count().
  workers: tp.Optional[int] = None

  expt_root: str = 'experiments'
  expt_dir: tp.Optional[str] = None
  tag: tp.Optional[str] = None

  version: int = VERSION

  def strategy_list(self) -> tp.List[Strategy]:
    if self.strategies:
      try:
        return [Strategy(s.strip()) for s in self.strategies.split(',') if s.strip()]
      except ValueError as e:
        raise errors.ConfigError(f'strategies: {e}') from None
    return [Strategy(self.optimization.strategy)]

  def validate(self) -> tp.List[str]:
    targets = types.targets_array(self.targets)
    if len(targets) < 1:
      raise errors.ConfigError('targets must not be empty')
    if self.trials < 1:
      raise errors.ConfigError(f'trials must be >= 1, got {self.trials}')
    if self.workers is not None and self.workers < 1:
      raise errors.ConfigError(f'workers must be >= 1, got {self.workers}')
    if self.patch.height < 1 or self.patch.width < 1:
      raise errors.ConfigError('patch.height and patch.width must be >= 1')
    self.noise.validate()
    notes = []
    for strategy in self.strategy_list():
      optimization = dataclasses.replace(self.optimization, strategy=strategy)
      notes.extend(optimization.validate())
    return sorted(set(notes))


def upgrade_config(config: dict) -> dict:
  """Upgrades a config dict to the latest version."""
  config = dict(config)
  version = config.get('version', VERSION)
  if version > VERSION:
    raise errors.ConfigError(
        f'config version {version} is newer than supported version {VERSION}')
  config['version'] = VERSION
  return config


def load_config(path=None, overrides: tp.Optional[dict] = None) -> Config:
  return flag_utils.load_config(Config, path, overrides, upgrade=upgrade_config)


def make_initial_patch(config: PatchConfig) -> np.ndarray:
  shape = (config.height, config.width)
  init = PatchInit(config.init)
  if init is PatchInit.FILE:
    if not config.path:
      raise errors.ConfigError('patch.path is required for patch.init=file')
    return saving.load_patch(config.path)
  if init is PatchInit.WHITE:
    return np.full(shape, 255.)
  if init is PatchInit.RANDOM:
    return utils.rng(config.seed, 'patch').uniform(0., 255., size=shape)
  return synth.render_face(config.face_index, shape)


def load_model(config: Config) -> networks.VictimModel:
  path = config.model_path
  if path is None:
    if config.dataset.data_dir is not None:
      raise errors.ConfigError('model_path is required with a custom dataset')
    path = data_lib.default_model_path(config.dataset)
  return saving.load_model(path)


class Experiment(tp.NamedTuple):
  model: networks.VictimModel
  train_images: np.ndarray
  test_images: np.ndarray


def load_experiment(config: Config) -> Experiment:
  dataset = data_lib.load_from_config(config.dataset)
  train_images, test_images = data_lib.split(
      dataset, config.dataset.train_fraction, config.dataset.split_seed)
  model = load_model(config)
  logging.info(
      f'Training on {len(train_images)} images, testing on {len(test_images)}')
  return Experiment(model, train_images, test_images)


def make_problem(
    config: Config,
    experiment: Experiment,
    log_fn: tp.Optional[tp.Callable[[dict], None]] = log_stats,
) -> strategies.AttackProblem:
  return strategies.AttackProblem(
      model=experiment.model,
      patch=make_initial_patch(config.patch),
      targets=types.targets_array(config.targets),
      train_images=experiment.train_images,
      test_images=experiment.test_images,
      optimization=config.optimization,
      noise=config.noise,
      seed=config.base_seed,
      config=flag_utils.to_dict(config),
      log_fn=log_fn,
  )


def run_experiment(
    config: Config,
    experiment: tp.Optional[Experiment] = None,
) -> tp.Dict[str, tp.List[TrialReport]]:
  """All configured strategies x trials, without writing anything."""
  notes = config.validate()
  for note in notes:
    logging.warning(note)
  if experiment is None:
    experiment = load_experiment(config)
  problem = make_problem(config, experiment)

  results = {}
  for strategy in config.strategy_list():
    results[strategy.value] = strategies.run_trials(
        problem, strategy, config.trials,
        base_seed=config.base_seed, workers=config.workers or os.cpu_count() or 1)
  return results


## Summaries

def summary_frame(results: tp.Dict[str, tp.List[TrialReport]]) -> pd.DataFrame:
  rows = []
  for strategy, reports in results.items():
    for trial, report in enumerate(reports):
      for k, test_loss in enumerate(report.test_loss):
        rows.append(dict(
            strategy=strategy,
            trial=trial,
            target_index=k,
            test_loss=test_loss,
            train_loss_final=report.train_loss_final[k],
            wall_seconds=report.wall_seconds,
        ))
  return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def summarize_trials(reports: tp.Sequence[TrialReport]) -> dict:
  """Mean and std of final test losses per target and of the per-trial mean."""
  test = np.array([r.test_loss for r in reports])  # [trials, K]
  per_trial = test.mean(axis=1)
  return dict(
      trials=len(reports),
      per_target_mean=test.mean(axis=0).tolist(),
      per_target_std=test.std(axis=0).tolist(),
      mean=float(per_trial.mean()),
      std=float(per_trial.std()),
      wall_seconds=float(np.mean([r.wall_seconds for r in reports])),
  )


def strategy_ordering(frame: pd.DataFrame) -> tp.List[str]:
  """Strategies sorted by mean final test loss, best first."""
  means = frame.groupby('strategy', sort=True)['test_loss'].mean()
  return [str(s) for s in means.sort_values(kind='stable').index]


def write_summary(frame: pd.DataFrame, path):
  with utils.atomic_write(path, 'w') as f:
    frame.to_csv(f, index=False, float_format='%.17g')


def read_summary(path) -> pd.DataFrame:
  try:
    frame = pd.read_csv(path)
  except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
    raise errors.FormatError(f'{path}: {e}') from None
  missing = [c for c in SUMMARY_COLUMNS if c not in frame.columns]
  if missing:
    raise errors.FormatError(f'{path}: missing summary columns {missing}')
  return frame


def trial_dir(expt_dir, strategy: str, trial: int) -> str:
  return os.path.join(expt_dir, strategy, f'trial_{trial}')


def train(config: Config) -> str:
  """Runs the experiment and writes reports, patches and summaries.

  Returns the experiment directory.
  """
  tag = config.tag or get_experiment_tag()
  expt_dir = config.expt_dir or os.path.join(config.expt_root, tag)
  os.makedirs(expt_dir, exist_ok=True)
  logging.info('experiment directory: %s', expt_dir)

  results = run_experiment(config)

  for strategy, reports in results.items():
    for trial, report in enumerate(reports):
      strategies.save_report(report, trial_dir(expt_dir, strategy, trial))

  frame = summary_frame(results)
  write_summary(frame, os.path.join(expt_dir, 'summary.csv'))

  summary = dict(
      config=flag_utils.to_dict(config),
      strategies={s: summarize_trials(r) for s, r in results.items()},
      ordering=strategy_ordering(frame),
  )
  utils.write_text(
      os.path.join(expt_dir, 'summary.json'), json.dumps(summary, indent=2))

  for strategy, stats in summary['strategies'].items():
    logging.info(
        f'{strategy}: mean test loss {stats["mean"]:.4f} +- {stats["std"]:.4f} '
        f'over {stats["trials"]} trials')
    if wandb.run is not None:
      wandb.summary[f'{strategy}/test_loss_mean'] = stats['mean']
      wandb.summary[f'{strategy}/test_loss_std'] = stats['std']
  logging.info('ordering (best first): %s', ', '.join(summary['ordering']))
  return expt_dir
