"""Synthetic desk-scale benchmark: scenes, a stand-in victim and face patches.

Scenes show a figure (a body ellipse with a head ellipse on top) in front of
a textured background. The figure's ground-truth position (x, y, z) is in
the camera frame of attacker_policy. The victim `tiny_frontnet` is a small
conv/relu/pool stack with seeded random filters whose final linear layer is
fit in closed form (ridge regression) to ground-truth positions of a
separate calibration set, so its predictions follow the figure.
"""

import json
import os
import pathlib
import threading
import typing as tp

from absl import logging
import numpy as np
import tensorflow as tf
import tqdm

from flying_patch import errors, networks, paths, pgm, saving, tf_utils, utils
from flying_patch.attacker_policy import CameraIntrinsics
from flying_patch.data import Dataset, MANIFEST_NAME

MODEL_NAME = 'tiny_frontnet'
MIN_SIDE = 8  # three 2x2 pools need at least 8 pixels per side
MIN_IMAGE_COUNT = 10

# Figure dimensions in meters.
BODY_HALF_WIDTH = 0.12
BODY_HALF_HEIGHT = 0.25
HEAD_RADIUS = 0.08

DEPTH_RANGE = (1.0, 3.0)

CALIBRATION_COUNT = 2000
RIDGE = 1e-3


class Scene(tp.NamedTuple):
  image: np.ndarray  # [H, W], integer valued
  pose: np.ndarray  # (x, y, z)


def camera(shape: tp.Tuple[int, int]) -> CameraIntrinsics:
  # Focal length of one image width: a 90 degree-ish horizontal field of view.
  return CameraIntrinsics.centered(shape, focal=float(shape[1]))


def _pixel_grid(shape):
  h, w = shape
  v, u = np.mgrid[0:h, 0:w].astype(np.float64)
  return u + 0.5, v + 0.5


def _ellipse(shape, center, radii) -> np.ndarray:
  u, v = _pixel_grid(shape)
  (cu, cv), (ru, rv) = center, radii
  return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.


def _background(rng: np.random.Generator, shape) -> np.ndarray:
  h, w = shape
  u, v = _pixel_grid(shape)
  u = u / max(h, w)
  v = v / max(h, w)
  image = np.full(shape, rng.uniform(90., 170.))
  for _ in range(4):
    fu, fv = rng.uniform(-3., 3., size=2)
    amplitude = rng.uniform(5., 25.)
    phase = rng.uniform(0., 2 * np.pi)
    image += amplitude * np.sin(2 * np.pi * (fu * u + fv * v) + phase)
  image += rng.normal(0., 6., size=shape)
  return image


def render_scene(rng: np.random.Generator, shape: tp.Tuple[int, int]) -> Scene:
  h, w = shape
  cam = camera(shape)
  image = _background(rng, shape)

  depth = rng.uniform(*DEPTH_RANGE)
  u = rng.uniform(0.2 * w, 0.8 * w)
  v = rng.uniform(0.4 * h, 0.7 * h)
  y, z = cam.unproject(u, v, depth)

  pixels_per_meter = cam.focal / depth
  body = _ellipse(
      shape, (u, v),
      (BODY_HALF_WIDTH * pixels_per_meter, BODY_HALF_HEIGHT * pixels_per_meter))
  head_v = v - (BODY_HALF_HEIGHT + HEAD_RADIUS) * pixels_per_meter
  head_radius = HEAD_RADIUS * pixels_per_meter
  head = _ellipse(shape, (u, head_v), (head_radius, head_radius))

  body_value = rng.uniform(15., 60.)
  image[body] = body_value
  image[head] = body_value + rng.uniform(10., 40.)

  image = np.clip(np.rint(image), 0., 255.)
  return Scene(image, np.array([depth, y, z]))


def render_face(index: int, shape: tp.Tuple[int, int] = (40, 40)) -> np.ndarray:
  """Synthetic face patch; indices 1-3 are the bundled fixtures."""
  if index < 1:
    raise errors.ParameterError(f'face index must be >= 1, got {index}')
  h, w = shape
  rng = utils.rng(0, 'face', index)

  image = np.full(shape, rng.uniform(200., 240.))
  face = _ellipse(
      shape, (w / 2, h / 2),
      (w * rng.uniform(0.32, 0.42), h * rng.uniform(0.40, 0.47)))
  image[face] = rng.uniform(140., 185.)

  eye_v = h * rng.uniform(0.36, 0.44)
  eye_du = w * rng.uniform(0.12, 0.18)
  eye_radii = (w * rng.uniform(0.05, 0.08), h * rng.uniform(0.03, 0.06))
  eye_value = rng.uniform(10., 50.)
  for side in (-1, 1):
    image[_ellipse(shape, (w / 2 + side * eye_du, eye_v), eye_radii)] = eye_value

  mouth = _ellipse(
      shape, (w / 2, h * rng.uniform(0.66, 0.72)),
      (w * rng.uniform(0.1, 0.18), h * rng.uniform(0.02, 0.05)))
  image[mouth] = rng.uniform(40., 90.)
  return np.rint(image)


## Model

def tiny_frontnet_specs() -> tp.List[networks.LayerSpec]:
  return [
      networks.conv2d(4, kernel=5, padding=2),
      networks.RELU,
      networks.MAXPOOL,
      networks.conv2d(8, kernel=3, padding=1),
      networks.RELU,
      networks.MAXPOOL,
      networks.conv2d(4, kernel=3, padding=1),
      networks.RELU,
      networks.MAXPOOL,
      networks.FLATTEN,
      networks.fully_connected(networks.OUTPUT_DIM),
  ]


def _random_weights(rng, specs, input_shape) -> tp.List[dict]:
  weights = []
  shape = input_shape
  for index, spec in enumerate(specs):
    layer = {}
    for name, weight_shape in networks.weight_shapes(spec, shape).items():
      if spec.kind is networks.LayerKind.CONV2D and name == 'kernel':
        fan_in = int(np.prod(weight_shape[:3]))
        layer[name] = rng.normal(0., np.sqrt(2. / fan_in), size=weight_shape)
      else:
        layer[name] = np.zeros(weight_shape)
    if index == 0:
      # Pixels are in [0, 255].
      layer['kernel'] = layer['kernel'] / 255.
    weights.append(layer)
    shape = networks.output_shape(spec, shape, index)
  return weights


def _feature_extractor(specs, weights) -> tp.Callable[[np.ndarray], np.ndarray]:
  layers = [
      networks.build_layer(spec, layer_weights, i)
      for i, (spec, layer_weights) in enumerate(zip(specs, weights))]

  @tf.function
  def extract(images):
    x = images[..., tf.newaxis]
    for layer in layers:
      x = layer(x)
    return x

  def extract_numpy(images: np.ndarray, chunk: int = 100) -> np.ndarray:
    return np.concatenate([
        extract(tf_utils.constant(images[i:i + chunk])).numpy()
        for i in range(0, len(images), chunk)])

  return extract_numpy


def fit_linear_head(features: np.ndarray, poses: np.ndarray, ridge: float = RIDGE):
  """Ridge regression of poses [n, 3] on features [n, d].

  Returns (kernel [d, 4], bias [4]) with a zero orientation column.
  """
  mean_f = features.mean(axis=0)
  mean_p = poses.mean(axis=0)
  centered = features - mean_f
  gram = centered.T @ centered
  d = gram.shape[0]
  regularizer = ridge * max(np.trace(gram) / d, 1e-12)
  coefficients = np.linalg.solve(
      gram + regularizer * np.eye(d), centered.T @ (poses - mean_p))

  kernel = np.zeros((d, networks.OUTPUT_DIM))
  kernel[:, :3] = coefficients
  bias = np.zeros(networks.OUTPUT_DIM)
  bias[:3] = mean_p - mean_f @ coefficients
  return kernel, bias


def build_tiny_frontnet(
    seed: int,
    shape: tp.Tuple[int, int],
    calibration_count: int = CALIBRATION_COUNT,
) -> networks.VictimModel:
  _check_shape(shape)
  input_shape = tuple(shape) + (1,)
  specs = tiny_frontnet_specs()
  weights = _random_weights(utils.rng(seed, 'weights'), specs, input_shape)

  scenes = [
      render_scene(utils.rng(seed, 'calibration', i), shape)
      for i in range(calibration_count)]
  images = np.stack([s.image for s in scenes])
  poses = np.stack([s.pose for s in scenes])

  extract = _feature_extractor(specs[:-1], weights[:-1])
  features = extract(images)
  kernel, bias = fit_linear_head(features, poses)
  weights[-1] = dict(kernel=kernel, bias=bias)

  model = networks.VictimModel(specs, weights, input_shape, name=MODEL_NAME)
  logging.info(
      f'Fit {MODEL_NAME} head on {calibration_count} calibration scenes, '
      f'{networks.count_parameters(model)} parameters')
  return model


## Benchmark

def _check_shape(shape):
  if len(shape) != 2 or min(shape) < MIN_SIDE:
    raise errors.DimensionError(
        'benchmark images are too small', expected=f'at least ({MIN_SIDE}, {MIN_SIDE})',
        actual=tuple(shape))


def generate_benchmark(
    seed: int,
    image_count: int,
    shape: tp.Tuple[int, int],
    out_dir: tp.Union[str, os.PathLike],
    calibration_count: int = CALIBRATION_COUNT,
) -> tp.Tuple[Dataset, networks.VictimModel]:
  """Writes images/*.pgm, images/manifest.json and the model file."""
  if image_count < MIN_IMAGE_COUNT:
    raise errors.ConfigError(
        f'image_count must be >= {MIN_IMAGE_COUNT}, got {image_count}')
  _check_shape(shape)
  tf_utils.enable_determinism()

  out_dir = pathlib.Path(out_dir)
  image_dir = out_dir / 'images'
  image_dir.mkdir(parents=True, exist_ok=True)

  model = build_tiny_frontnet(seed, shape, calibration_count)
  model_bytes = saving.save_model(out_dir / f'{MODEL_NAME}.pfnet', model)

  names = []
  images = []
  checksums = {}
  ground_truth = {}
  for i in tqdm.trange(image_count, desc='render', disable=image_count < 100):
    scene = render_scene(utils.rng(seed, 'scene', i), shape)
    name = f'{i:04d}.pgm'
    data = pgm.write_pgm(image_dir / name, scene.image)
    names.append(name)
    images.append(scene.image)
    checksums[name] = utils.md5(data)
    ground_truth[name] = scene.pose.tolist()

  manifest = dict(
      generator=MODEL_NAME,
      seed=seed,
      image_count=image_count,
      shape=list(shape),
      images=checksums,
      ground_truth=ground_truth,
      model=dict(file=f'{MODEL_NAME}.pfnet', md5=utils.md5(model_bytes)),
  )
  utils.write_text(image_dir / MANIFEST_NAME, json.dumps(manifest, indent=2))

  dataset = Dataset(
      np.stack(images), provenance=f'benchmark(seed={seed})', names=tuple(names))
  return dataset, model


def load_ground_truth(data_dir: tp.Union[str, os.PathLike]) -> np.ndarray:
  """Ground-truth poses [N, 3] in file order."""
  with open(os.path.join(data_dir, MANIFEST_NAME)) as f:
    manifest = json.load(f)
  truth = manifest['ground_truth']
  return np.array([truth[name] for name in sorted(truth)])


def benchmark_dir(seed: int, image_count: int, shape: tp.Tuple[int, int]) -> pathlib.Path:
  if (seed, image_count, tuple(shape)) == (0, 400, (96, 160)):
    return paths.BENCHMARK_PATH
  h, w = shape
  return paths.DATA_PATH / f'benchmark_s{seed}_n{image_count}_{h}x{w}'


def _is_complete(out_dir: pathlib.Path, seed, image_count, shape) -> bool:
  manifest_path = out_dir / 'images' / MANIFEST_NAME
  if not manifest_path.exists():
    return False
  with open(manifest_path) as f:
    manifest = json.load(f)
  model_path = out_dir / manifest['model']['file']
  return (
      manifest['seed'] == seed
      and manifest['image_count'] == image_count
      and tuple(manifest['shape']) == tuple(shape)
      and model_path.exists())


_generate_lock = threading.Lock()


def ensure_benchmark(
    seed: int = 0,
    image_count: int = 400,
    shape: tp.Tuple[int, int] = (96, 160),
    out_dir: tp.Optional[tp.Union[str, os.PathLike]] = None,
) -> pathlib.Path:
  """Generates the benchmark on first use; returns its directory."""
  if out_dir is None:
    out_dir = benchmark_dir(seed, image_count, shape)
  out_dir = pathlib.Path(out_dir)
  with _generate_lock:
    if not _is_complete(out_dir, seed, image_count, shape):
      logging.info(f'Generating benchmark into {out_dir}')
      generate_benchmark(seed, image_count, shape, out_dir)
  return out_dir
