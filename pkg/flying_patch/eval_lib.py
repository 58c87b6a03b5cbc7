"""Noise-free evaluation of saved patches and transforms."""

import dataclasses
import enum
import os
import typing as tp

from absl import logging
import numpy as np
import pandas as pd

from flying_patch import (
    attack_loss,
    data as data_lib,
    errors,
    networks,
    placement,
    saving,
    strategies,
    train_lib,
    types,
    utils,
)

EVAL_COLUMNS = ['row', 'target_index', 'target_x', 'target_y', 'target_z', 'loss']

BASE_IMAGE = 'base_image'
WHITE_PATCH = 'white_patch'
INITIAL_PATCH = 'initial_patch'
TRAINED_PATCH = 'trained_patch'


class ImageSet(enum.Enum):
  TEST = 'test'
  TRAIN = 'train'
  ALL = 'all'


@dataclasses.dataclass
class EvalConfig:
  # Output directory of one trial; fills in everything below from its report.
  trial_dir: tp.Optional[str] = None

  patch_path: tp.Optional[str] = None
  initial_patch_path: tp.Optional[str] = None
  transforms_path: tp.Optional[str] = None
  model_path: tp.Optional[str] = None
  dataset: data_lib.DatasetConfig = dataclasses.field(
      default_factory=data_lib.DatasetConfig)
  images: ImageSet = ImageSet.TEST

  scale_min: float = 0.3
  scale_max: float = 0.5
  lock_rotation: bool = True


class Artifacts(tp.NamedTuple):
  model: networks.VictimModel
  images: np.ndarray
  patch: np.ndarray
  initial_patch: tp.Optional[np.ndarray]
  transforms: np.ndarray  # [K, 4]
  targets: np.ndarray  # [K, 3]
  constraints: placement.Constraints


def _select_images(dataset_config: data_lib.DatasetConfig, which: ImageSet) -> np.ndarray:
  dataset = data_lib.load_from_config(dataset_config)
  if which is ImageSet.ALL:
    return dataset.images
  train, test = data_lib.split(
      dataset, dataset_config.train_fraction, dataset_config.split_seed)
  return train if which is ImageSet.TRAIN else test


def _from_trial_dir(config: EvalConfig) -> Artifacts:
  report = strategies.load_report(config.trial_dir)
  run_config = train_lib.load_config(
      os.path.join(config.trial_dir, strategies.REPORT_FILE))
  return Artifacts(
      model=train_lib.load_model(run_config),
      images=_select_images(run_config.dataset, ImageSet(config.images)),
      patch=report.patch,
      initial_patch=report.initial_patch,
      transforms=np.array(report.final_transforms, dtype=np.float64),
      targets=types.targets_array(run_config.targets),
      constraints=run_config.optimization.constraints(),
  )


def _from_paths(config: EvalConfig) -> Artifacts:
  if not (config.patch_path and config.transforms_path):
    raise errors.ConfigError(
        'either trial_dir or both patch_path and transforms_path are required')
  transforms, targets = saving.load_transforms(config.transforms_path)
  if config.model_path:
    model = saving.load_model(config.model_path)
  elif config.dataset.data_dir is None:
    model = saving.load_model(data_lib.default_model_path(config.dataset))
  else:
    raise errors.ConfigError('model_path is required with a custom dataset')
  initial_patch = None
  if config.initial_patch_path:
    initial_patch = saving.load_patch(config.initial_patch_path)
  return Artifacts(
      model=model,
      images=_select_images(config.dataset, ImageSet(config.images)),
      patch=saving.load_patch(config.patch_path),
      initial_patch=initial_patch,
      transforms=transforms,
      targets=targets,
      constraints=placement.Constraints(
          config.scale_min, config.scale_max,
          lock_rotation=config.lock_rotation),
  )


def load_artifacts(config: EvalConfig) -> Artifacts:
  if config.trial_dir:
    return _from_trial_dir(config)
  return _from_paths(config)


def _rows(name: str, targets: np.ndarray, losses: tp.Sequence[float]) -> tp.List[dict]:
  return [
      dict(row=name, target_index=k, target_x=t[0], target_y=t[1],
           target_z=t[2], loss=float(loss))
      for k, (t, loss) in enumerate(zip(targets, losses))
  ]


def evaluate_artifacts(artifacts: Artifacts) -> pd.DataFrame:
  """Per-target loss of the trained patch next to the comparison rows.

  The base image row is the loss without any patch; the white and initial
  patches are placed at the same transforms as the trained patch.
  """
  def patch_loss(patch):
    return attack_loss.evaluate(
        artifacts.model, artifacts.images, patch, artifacts.transforms,
        artifacts.targets, artifacts.constraints).per_target

  rows = _rows(BASE_IMAGE, artifacts.targets, attack_loss.baseline_loss(
      artifacts.model, artifacts.images, artifacts.targets))
  rows += _rows(WHITE_PATCH, artifacts.targets,
                patch_loss(np.full_like(artifacts.patch, 255.)))
  if artifacts.initial_patch is not None:
    rows += _rows(INITIAL_PATCH, artifacts.targets,
                  patch_loss(artifacts.initial_patch))
  rows += _rows(TRAINED_PATCH, artifacts.targets, patch_loss(artifacts.patch))
  return pd.DataFrame(rows, columns=EVAL_COLUMNS)


def evaluate(config: EvalConfig, out: tp.Optional[str] = None) -> pd.DataFrame:
  artifacts = load_artifacts(config)
  logging.info(
      f'Evaluating {len(artifacts.targets)} targets on {len(artifacts.images)} images')
  frame = evaluate_artifacts(artifacts)
  for row, losses in frame.groupby('row', sort=False)['loss']:
    logging.info(f'{row}: ' + ', '.join(f'{l:.4f}' for l in losses))
  if out is not None:
    with utils.atomic_write(out, 'w') as f:
      frame.to_csv(f, index=False, float_format='%.17g')
  return frame
