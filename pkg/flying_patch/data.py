import dataclasses
import glob
import json
import os
from typing import Iterator, List, NamedTuple, Optional, Tuple

from absl import logging
import numpy as np

from flying_patch import errors, paths, pgm, utils

MANIFEST_NAME = 'manifest.json'


class Dataset(NamedTuple):
  images: np.ndarray  # [N, H, W] float64 in [0, 255]
  provenance: str  # source directory or generator description
  names: Tuple[str, ...] = ()

  @property
  def image_shape(self) -> Tuple[int, int]:
    return self.images.shape[1:]


@dataclasses.dataclass
class DatasetConfig:
  # Directory of PGM files; None means the bundled benchmark.
  data_dir: Optional[str] = None
  # Benchmark generation, used when data_dir is None.
  image_count: int = 400
  height: int = 96
  width: int = 160
  benchmark_seed: int = 0

  train_fraction: float = 0.9
  split_seed: int = 0


@dataclasses.dataclass
class NoiseConfig:
  transform_std: float = 0.1
  pixel_std: float = 10.
  enabled: bool = True

  def validate(self):
    if self.transform_std < 0 or self.pixel_std < 0:
      raise errors.ConfigError(
          f'noise stds must be >= 0, got {self.transform_std}, {self.pixel_std}')


def _read_manifest(data_dir: str) -> Optional[dict]:
  path = os.path.join(data_dir, MANIFEST_NAME)
  if not os.path.exists(path):
    return None
  with open(path) as f:
    try:
      return json.load(f)
    except json.JSONDecodeError as e:
      raise errors.FormatError(f'{path}: {e}') from None


def load_dataset(data_dir: str) -> Dataset:
  """Loads every *.pgm file of a directory in lexicographic order.

  If the directory has a manifest, file checksums are verified against it.
  """
  if not os.path.isdir(data_dir):
    raise FileNotFoundError(f'dataset directory {data_dir} does not exist')

  filenames = sorted(glob.glob(os.path.join(data_dir, '*.pgm')))
  if not filenames:
    raise errors.FormatError(f'no .pgm images found in {data_dir}')

  manifest = _read_manifest(data_dir)
  checksums = manifest.get('images', {}) if manifest else {}

  images = []
  names = []
  for path in filenames:
    name = os.path.basename(path)
    with open(path, 'rb') as f:
      data = f.read()
    if name in checksums and utils.md5(data) != checksums[name]:
      raise errors.FormatError(f'{path}: checksum does not match the manifest')
    image = pgm.decode_pgm(data, name=path)
    if images and image.shape != images[0].shape:
      raise errors.FormatError(
          f'{path}: image is {image.shape} but {names[0]} is {images[0].shape}')
    images.append(image)
    names.append(name)

  missing = set(checksums) - set(names)
  if missing:
    raise errors.FormatError(
        f'{data_dir}: images listed in the manifest are missing: {sorted(missing)}')

  logging.info(f'Loaded {len(images)} images of shape {images[0].shape} from {data_dir}')
  return Dataset(np.stack(images), provenance=data_dir, names=tuple(names))


def split(
    dataset: Dataset,
    train_fraction: float,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
  """Seeded disjoint train/test split, returned as image arrays."""
  train_idx, test_idx = split_indices(len(dataset.images), train_fraction, seed)
  return dataset.images[train_idx], dataset.images[test_idx]


def split_indices(n: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
  if not 0 < train_fraction < 1:
    raise errors.ConfigError(f'train_fraction must be in (0, 1), got {train_fraction}')
  if n < 2:
    raise errors.ConfigError(f'need at least 2 images to split, got {n}')
  permutation = np.random.default_rng(seed).permutation(n)
  num_train = min(max(int(np.floor(train_fraction * n)), 1), n - 1)
  return permutation[:num_train], permutation[num_train:]


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
  if batch_size < 1:
    raise errors.ConfigError(f'batch_size must be >= 1, got {batch_size}')
  if n < 1:
    raise errors.ConfigError('cannot batch an empty training set')
  permutation = utils.rng(seed, 'batches', epoch).permutation(n)
  return [permutation[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(
    images: np.ndarray,
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[np.ndarray]:
  """One epoch of shuffled batches; the final short batch is kept."""
  for indices in batch_indices(len(images), batch_size, seed, epoch):
    yield images[indices]


def pixel_noise(rng: np.random.Generator, shape, std: float) -> np.ndarray:
  return rng.normal(0., std, size=shape)


def add_pixel_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
  if std < 0:
    raise errors.ParameterError(f'std must be >= 0, got {std}')
  image = np.asarray(image, dtype=np.float64)
  if std == 0:
    return image.copy()
  return np.clip(image + pixel_noise(rng, image.shape, std), 0., 255.)


def load_from_config(config: DatasetConfig) -> Dataset:
  if config.data_dir is not None:
    return load_dataset(config.data_dir)

  from flying_patch import synth
  data_dir = synth.ensure_benchmark(
      seed=config.benchmark_seed,
      image_count=config.image_count,
      shape=(config.height, config.width),
  )
  dataset = load_dataset(os.fspath(data_dir / 'images'))
  return dataset._replace(
      provenance=f'benchmark(seed={config.benchmark_seed}, dir={data_dir})')


def default_model_path(config: DatasetConfig) -> str:
  """The benchmark model matching a benchmark dataset config."""
  from flying_patch import synth
  data_dir = synth.ensure_benchmark(
      seed=config.benchmark_seed,
      image_count=config.image_count,
      shape=(config.height, config.width),
  )
  return os.fspath(data_dir / os.path.basename(paths.BENCHMARK_MODEL))
