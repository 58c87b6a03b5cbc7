import contextlib
import hashlib
import os
import tempfile
import time
import typing as tp
import zlib

import numpy as np

RngKey = tp.Union[int, str]


def md5(b: bytes) -> str:
  return hashlib.md5(b).hexdigest()


def array_checksum(x: np.ndarray) -> str:
  """Checksum of the exact float64 bytes of an array."""
  return md5(np.ascontiguousarray(x, dtype='<f8').tobytes())


def _key_to_int(key: RngKey) -> int:
  if isinstance(key, str):
    return zlib.crc32(key.encode())
  if key < 0:
    raise ValueError(f'rng keys must be non-negative, got {key}')
  return int(key)


def rng(seed: int, *keys: RngKey) -> np.random.Generator:
  """A private random stream for (seed, *keys).

  Streams with different keys are statistically independent, and a stream
  does not depend on how many other streams were drawn before it. This is
  what makes serial and parallel execution bit-identical.
  """
  entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
  return np.random.default_rng(np.random.SeedSequence(entropy))


class PhaseTimer:
  """Accumulates wall-clock seconds per named phase of a trial."""

  def __init__(self):
    self.seconds: tp.Dict[str, float] = {}
    self.calls: tp.Dict[str, int] = {}

  @contextlib.contextmanager
  def __call__(self, phase: str):
    start = time.perf_counter()
    try:
      yield
    finally:
      elapsed = time.perf_counter() - start
      self.seconds[phase] = self.seconds.get(phase, 0.) + elapsed
      self.calls[phase] = self.calls.get(phase, 0) + 1

  def totals(self) -> tp.Dict[str, float]:
    return dict(sorted(self.seconds.items()))


@contextlib.contextmanager
def atomic_write(path: tp.Union[str, os.PathLike], mode: str = 'wb'):
  """Open a temporary file that replaces `path` only on success."""
  path = os.fspath(path)
  directory = os.path.dirname(path) or '.'
  os.makedirs(directory, exist_ok=True)
  fd, tmp_path = tempfile.mkstemp(
      dir=directory, prefix='.' + os.path.basename(path) + '.', suffix='.tmp')
  try:
    with os.fdopen(fd, mode) as f:
      yield f
      f.flush()
      os.fsync(f.fileno())
    os.replace(tmp_path, path)
  except BaseException:
    if os.path.exists(tmp_path):
      os.remove(tmp_path)
    raise


def write_bytes(path, data: bytes):
  with atomic_write(path, 'wb') as f:
    f.write(data)


def write_text(path, text: str):
  with atomic_write(path, 'w') as f:
    f.write(text)


def mean_and_std(xs: tp.Sequence[float]) -> tuple[float, float]:
  xs = np.asarray(xs, dtype=np.float64)
  return float(np.mean(xs)), float(np.std(xs))
