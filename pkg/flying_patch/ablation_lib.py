"""Target-count and initial-patch ablations."""

import dataclasses
import os
import typing as tp

from absl import logging
import numpy as np
import pandas as pd
import tqdm

from flying_patch import errors, plotting, train_lib, utils
from flying_patch.train_lib import PatchConfig, PatchInit

# Nine targets at 1m on a grid over y and z, then one further away.
TARGET_LADDER = tuple(
    (1., float(y), float(z)) for y in (-1, 0, 1) for z in (-1, 0, 1)
) + ((2., 0., 0.),)
MAX_TARGETS = len(TARGET_LADDER)

TARGETS_COLUMNS = ['K', 'mean', 'variance', 'std', 'trials']
PATCHES_COLUMNS = [
    'initial_patch', 'strategy', 'mean_test_loss', 'std_test_loss',
    'mean_target_std', 'best',
]

DEFAULT_INITIAL_PATCHES = 'face1,face2,face3,white,random'


@dataclasses.dataclass
class AblationConfig:
  run: train_lib.Config = dataclasses.field(default_factory=train_lib.Config)
  k_max: int = MAX_TARGETS
  # Comma-separated; faceN, white or random.
  initial_patches: str = DEFAULT_INITIAL_PATCHES


def ladder(k: int) -> tp.List[tp.List[float]]:
  if not 1 <= k <= MAX_TARGETS:
    raise errors.ConfigError(f'K must be in [1, {MAX_TARGETS}], got {k}')
  return [list(t) for t in TARGET_LADDER[:k]]


def per_trial_means(reports: tp.Sequence[train_lib.TrialReport]) -> np.ndarray:
  return np.array([np.mean(r.test_loss) for r in reports])


def ablate_targets(
    config: train_lib.Config,
    k_max: int = MAX_TARGETS,
    experiment: tp.Optional[train_lib.Experiment] = None,
) -> pd.DataFrame:
  """Runs K = 1..k_max targets from the ladder with the configured strategy."""
  ladder(k_max)
  if config.strategies:
    logging.warning('strategies is ignored by the target ablation')
  config = dataclasses.replace(config, strategies=None)
  if experiment is None:
    experiment = train_lib.load_experiment(config)

  rows = []
  for k in tqdm.trange(1, k_max + 1, desc='targets'):
    k_config = dataclasses.replace(config, targets=ladder(k))
    (reports,) = train_lib.run_experiment(k_config, experiment).values()
    mean, std = utils.mean_and_std(per_trial_means(reports))
    rows.append(dict(
        K=k,
        mean=mean,
        variance=std ** 2,
        std=std,
        trials=len(reports),
    ))
    logging.info(f'K={k}: {rows[-1]["mean"]:.4f} +- {rows[-1]["std"]:.4f}')
  return pd.DataFrame(rows, columns=TARGETS_COLUMNS)


def parse_initial_patch(name: str, base: PatchConfig) -> PatchConfig:
  name = name.strip()
  if name == 'white':
    return dataclasses.replace(base, init=PatchInit.WHITE)
  if name == 'random':
    return dataclasses.replace(base, init=PatchInit.RANDOM)
  if name.startswith('face') and name[4:].isdigit() and int(name[4:]) >= 1:
    return dataclasses.replace(base, init=PatchInit.FACE, face_index=int(name[4:]))
  raise errors.ConfigError(
      f'unknown initial patch {name!r}; expected faceN, white or random')


def ablate_initial_patches(
    config: train_lib.Config,
    initial_patches: str = DEFAULT_INITIAL_PATCHES,
    experiment: tp.Optional[train_lib.Experiment] = None,
) -> tp.Tuple[pd.DataFrame, pd.DataFrame]:
  """Every strategy from every initial patch.

  Returns the per-(patch, strategy) table, with the best strategy of each
  initial patch flagged, and the per-trial mean test losses behind it.
  """
  names = [n.strip() for n in initial_patches.split(',') if n.strip()]
  if not names:
    raise errors.ConfigError('no initial patches given')
  patch_configs = {name: parse_initial_patch(name, config.patch) for name in names}
  if experiment is None:
    experiment = train_lib.load_experiment(config)

  rows = []
  trial_rows = []
  for name in tqdm.tqdm(names, desc='initial patches'):
    results = train_lib.run_experiment(
        dataclasses.replace(config, patch=patch_configs[name]), experiment)
    for strategy, reports in results.items():
      means = per_trial_means(reports)
      mean, std = utils.mean_and_std(means)
      stats = train_lib.summarize_trials(reports)
      rows.append(dict(
          initial_patch=name,
          strategy=strategy,
          mean_test_loss=mean,
          std_test_loss=std,
          mean_target_std=float(np.mean(stats['per_target_std'])),
          best=False,
      ))
      trial_rows.extend(
          dict(initial_patch=name, strategy=strategy, trial=i, test_loss=m)
          for i, m in enumerate(means))

  frame = pd.DataFrame(rows, columns=PATCHES_COLUMNS)
  best = frame.groupby('initial_patch', sort=False)['mean_test_loss'].idxmin()
  frame.loc[best.to_numpy(), 'best'] = True
  return frame, pd.DataFrame(trial_rows)


def _write_csv(frame: pd.DataFrame, path: str):
  with utils.atomic_write(path, 'w') as f:
    frame.to_csv(f, index=False, float_format='%.17g')


def _out_dir(config: train_lib.Config, name: str) -> str:
  out_dir = config.expt_dir or os.path.join(
      config.expt_root, config.tag or f'{name}_{train_lib.get_experiment_tag()}')
  os.makedirs(out_dir, exist_ok=True)
  return out_dir


def run_target_ablation(config: AblationConfig) -> str:
  out_dir = _out_dir(config.run, 'ablation_targets')
  frame = ablate_targets(config.run, config.k_max)
  _write_csv(frame, os.path.join(out_dir, 'ablation_targets.csv'))
  utils.write_bytes(
      os.path.join(out_dir, 'ablation_targets.svg'),
      plotting.line_with_band(frame, 'K', 'mean', 'std', xlabel='targets K'))
  return out_dir


def run_patch_ablation(config: AblationConfig) -> str:
  out_dir = _out_dir(config.run, 'ablation_patches')
  frame, trials = ablate_initial_patches(config.run, config.initial_patches)
  _write_csv(frame, os.path.join(out_dir, 'ablation_patches.csv'))
  _write_csv(trials, os.path.join(out_dir, 'ablation_patches_trials.csv'))
  utils.write_bytes(
      os.path.join(out_dir, 'ablation_patches.svg'),
      plotting.grouped_bars(trials, 'initial_patch', 'strategy', 'test_loss'))
  for row in frame[frame['best']].itertuples():
    logging.info(
        f'{row.initial_patch}: best {row.strategy} {row.mean_test_loss:.4f} '
        f'(target std {row.mean_target_std:.4f})')
  return out_dir
