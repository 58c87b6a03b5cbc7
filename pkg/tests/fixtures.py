"""Small models, images and benchmarks shared by the test suites."""

import functools
import os
import tempfile

import numpy as np

from flying_patch import networks, synth

IMAGE_SHAPE = (12, 16)

SMALL_SPECS = [
    networks.conv2d(2, 3, stride=2),
    networks.RELU,
    networks.MAXPOOL,
    networks.FLATTEN,
    networks.fully_connected(networks.OUTPUT_DIM),
]

# Benchmark size that keeps end-to-end runs to seconds.
BENCHMARK_SHAPE = (24, 40)
BENCHMARK_IMAGES = 12
CALIBRATION_COUNT = 200

def small_model(seed: int = 0, shape=IMAGE_SHAPE) -> networks.VictimModel:
  rng = np.random.default_rng(seed)
  input_shape = tuple(shape) + (1,)
  weights = []
  current = input_shape
  for i, spec in enumerate(SMALL_SPECS):
    weights.append({
        name: rng.normal(0., 0.05, size=s)
        for name, s in networks.weight_shapes(spec, current).items()})
    current = networks.output_shape(spec, current, i)
  return networks.VictimModel(SMALL_SPECS, weights, input_shape)

def random_images(n: int, seed: int = 0, shape=IMAGE_SHAPE) -> np.ndarray:
  return np.random.default_rng(seed).uniform(0., 255., (n,) + tuple(shape))

@functools.lru_cache(maxsize=None)
def small_benchmark() -> str:
  """Generates a small benchmark once per process; returns its directory."""
  out_dir = os.path.join(tempfile.mkdtemp(prefix='flying_patch_'), 'benchmark')
  synth.generate_benchmark(
      seed=0,
      image_count=BENCHMARK_IMAGES,
      shape=BENCHMARK_SHAPE,
      out_dir=out_dir,
      calibration_count=CALIBRATION_COUNT,
  )
  return out_dir

def benchmark_model_path() -> str:
  return os.path.join(small_benchmark(), f'{synth.MODEL_NAME}.pfnet')

def benchmark_images_dir() -> str:
  return os.path.join(small_benchmark(), 'images')

def relative_error(a: float, b: float) -> float:
  return abs(a - b) / max(abs(a), abs(b), 1e-8)

def numeric_derivatives(f, x: np.ndarray, index, step: float, rtol: float) -> list:
  """Finite-difference estimates of df/dx[index].

  ReLU, max-pool and bilinear cell boundaries make the functions under test
  piecewise smooth. When the central differences at `step` and `step / 100`
  disagree a kink lies within the step, and the analytic gradient matches
  the one-sided difference that does not cross it.
  """
  def shifted(delta):
    y = x.copy()
    y[index] += delta
    return f(y)

  central = (shifted(step) - shifted(-step)) / (2 * step)
  small = step / 100
  fine = (shifted(small) - shifted(-small)) / (2 * small)
  if relative_error(central, fine) < rtol:
    return [central]
  at_x = f(x)
  return [(shifted(small) - at_x) / small, (at_x - shifted(-small)) / small]

def check_gradient(test, f, x, gradient, indices, step, rtol=1e-4) -> int:
  """Asserts gradient agrees with finite differences; returns the kink count."""
  kinks = 0
  for index in indices:
    estimates = numeric_derivatives(f, x, index, step, rtol)
    kinks += len(estimates) > 1
    error = min(relative_error(gradient[index], e) for e in estimates)
    test.assertLess(
        error, rtol, f'{index}: analytic {gradient[index]}, numeric {estimates}')
  return kinks
