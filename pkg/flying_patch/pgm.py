"""Binary PGM (P5) images with maxval 255."""

import os
import typing as tp

import numpy as np

from flying_patch import errors, utils

PathLike = tp.Union[str, os.PathLike]


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
  """Reads `count` whitespace-separated header tokens, skipping comments.

  Returns the tokens and the offset of the single whitespace byte that ends
  the header.
  """
  tokens = []
  pos = 0
  n = len(data)
  while len(tokens) < count:
    while pos < n and data[pos:pos + 1].isspace():
      pos += 1
    if pos < n and data[pos:pos + 1] == b'#':
      while pos < n and data[pos:pos + 1] not in (b'\n', b'\r'):
        pos += 1
      continue
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
      pos += 1
    if start == pos:
      raise errors.FormatError('truncated PGM header')
    tokens.append(data[start:pos])
  return tokens, pos


def decode_pgm(data: bytes, name: str = '<bytes>') -> np.ndarray:
  """Decodes P5 bytes into a float64 [height, width] array."""
  if not data.startswith(b'P5'):
    raise errors.FormatError(f'{name}: not a binary PGM (P5) file')
  try:
    tokens, pos = _tokens(data, 4)
  except errors.FormatError as e:
    raise errors.FormatError(f'{name}: {e}') from None
  try:
    width, height, maxval = (int(t) for t in tokens[1:])
  except ValueError:
    raise errors.FormatError(f'{name}: malformed PGM header') from None
  if width < 1 or height < 1:
    raise errors.FormatError(f'{name}: empty image {width}x{height}')
  if maxval != 255:
    raise errors.FormatError(f'{name}: only maxval 255 is supported, got {maxval}')

  body = data[pos + 1:]
  if len(body) < width * height:
    raise errors.FormatError(
        f'{name}: expected {width * height} pixel bytes, got {len(body)}')
  pixels = np.frombuffer(body, dtype=np.uint8, count=width * height)
  return pixels.reshape(height, width).astype(np.float64)


def encode_pgm(image: np.ndarray) -> bytes:
  """Encodes an image as P5, rounding to the nearest integer in [0, 255]."""
  image = np.asarray(image, dtype=np.float64)
  if image.ndim != 2:
    raise errors.DimensionError('PGM images are 2D', actual=image.shape)
  height, width = image.shape
  pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
  header = f'P5\n{width} {height}\n255\n'.encode('ascii')
  return header + pixels.tobytes()


def read_pgm(path: PathLike) -> np.ndarray:
  with open(path, 'rb') as f:
    data = f.read()
  return decode_pgm(data, name=os.fspath(path))


def write_pgm(path: PathLike, image: np.ndarray) -> bytes:
  """Atomically writes a P5 file; returns the bytes written."""
  data = encode_pgm(image)
  utils.write_bytes(path, data)
  return data
