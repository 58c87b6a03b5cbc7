"""On-disk formats: victim models, patches, transforms and optimizer state.

Model files come in two flavors carrying the same fields:

  binary   b'PFNET1', then little-endian
             uint32 height, width, channels, num_layers
             per layer: uint8 kind tag, int32 out_channels, kernel, stride,
               padding, out_features
           followed by every layer's weight arrays in declared order as
           float64, row-major, with shapes implied by the layer chain.
  text     a JSON manifest {"magic": "PFNET1", "input": {...}, "layers": [...]}
           where each layer carries its hyperparameters and nested-list
           weights. Meant for small hand-written test models.
"""

import io
import json
import os
import struct
import typing as tp

import numpy as np

from flying_patch import errors, networks, optimizer, pgm, utils
from flying_patch.networks import LayerKind, LayerSpec

PathLike = tp.Union[str, os.PathLike]

MAGIC = b'PFNET1'
KIND_TAGS = list(LayerKind)

_HEADER = struct.Struct('<IIII')
_LAYER = struct.Struct('<Biiiii')

ADAM_MAGIC = b'ADAM1'
_ADAM_HEADER = struct.Struct('<qqdddd')


def _spec_fields(spec: LayerSpec) -> tuple[int, ...]:
  return (spec.out_channels, spec.kernel, spec.stride, spec.padding,
          spec.out_features)


def encode_model(model: networks.VictimModel) -> bytes:
  buf = io.BytesIO()
  buf.write(MAGIC)
  buf.write(_HEADER.pack(*model.input_shape, len(model.specs)))
  for spec in model.specs:
    buf.write(_LAYER.pack(KIND_TAGS.index(spec.kind), *_spec_fields(spec)))
  for spec, weights in zip(model.specs, model.weights):
    for name in networks.WEIGHT_NAMES[spec.kind]:
      buf.write(np.ascontiguousarray(weights[name], dtype='<f8').tobytes())
  return buf.getvalue()


def decode_model(data: bytes, name: str = '<bytes>') -> networks.VictimModel:
  if not data.startswith(MAGIC):
    raise errors.FormatError(f'{name}: missing {MAGIC!r} magic')
  pos = len(MAGIC)
  try:
    height, width, channels, num_layers = _HEADER.unpack_from(data, pos)
  except struct.error:
    raise errors.FormatError(f'{name}: truncated header') from None
  pos += _HEADER.size

  specs = []
  for index in range(num_layers):
    try:
      tag, *fields = _LAYER.unpack_from(data, pos)
    except struct.error:
      raise errors.FormatError(
          f'{name}: truncated layer list at layer {index}') from None
    pos += _LAYER.size
    if tag >= len(KIND_TAGS):
      raise errors.FormatError(f'{name}: layer {index} has unknown kind tag {tag}')
    specs.append(LayerSpec(KIND_TAGS[tag], *fields))

  # Weight shapes are implied by the layer chain.
  weights = []
  shape = (height, width, channels)
  for index, spec in enumerate(specs):
    networks.check_hyperparameters(spec, index)
    layer_weights = {}
    for weight_name, weight_shape in networks.weight_shapes(spec, shape).items():
      count = int(np.prod(weight_shape))
      nbytes = 8 * count
      if pos + nbytes > len(data):
        raise errors.FormatError(
            f'{name}: truncated weights for {spec.describe(index)}')
      array = np.frombuffer(data, dtype='<f8', count=count, offset=pos)
      layer_weights[weight_name] = array.reshape(weight_shape).astype(np.float64)
      pos += nbytes
    weights.append(layer_weights)
    shape = networks.output_shape(spec, shape, index)

  if pos != len(data):
    raise errors.FormatError(f'{name}: {len(data) - pos} trailing bytes')

  return networks.VictimModel(specs, weights, (height, width, channels))


def model_to_manifest(model: networks.VictimModel) -> dict:
  layers = []
  for spec, weights in zip(model.specs, model.weights):
    layer = dict(kind=spec.kind.value)
    for field, value in zip(LayerSpec._fields[1:], _spec_fields(spec)):
      layer[field] = value
    if weights:
      layer['weights'] = {k: v.tolist() for k, v in weights.items()}
    layers.append(layer)
  height, width, channels = model.input_shape
  return dict(
      magic=MAGIC.decode(),
      input=dict(height=height, width=width, channels=channels),
      layers=layers,
  )


def model_from_manifest(manifest: dict, name: str = '<manifest>') -> networks.VictimModel:
  if manifest.get('magic') != MAGIC.decode():
    raise errors.FormatError(f'{name}: missing "magic": "{MAGIC.decode()}"')
  try:
    input_ = manifest['input']
    input_shape = (
        int(input_['height']), int(input_['width']),
        int(input_.get('channels', 1)))
    layer_dicts = manifest['layers']
  except (KeyError, TypeError, ValueError) as e:
    raise errors.FormatError(f'{name}: malformed header: {e!r}') from None

  specs = []
  weights = []
  for index, layer in enumerate(layer_dicts):
    try:
      kind = LayerKind(layer['kind'])
    except (KeyError, ValueError):
      raise errors.FormatError(
          f'{name}: layer {index} has unknown kind {layer.get("kind")!r}') from None
    fields = {}
    for field in LayerSpec._fields[1:]:
      if field in layer:
        try:
          fields[field] = int(layer[field])
        except (TypeError, ValueError):
          raise errors.FormatError(
              f'{name}: layer {index} ({kind.value}) has non-integer {field}') from None
    specs.append(LayerSpec(kind, **fields))
    try:
      layer_weights = {
          k: np.asarray(v, dtype=np.float64)
          for k, v in layer.get('weights', {}).items()}
    except ValueError:
      raise errors.FormatError(
          f'{name}: layer {index} ({kind.value}) has ragged weights') from None
    weights.append(layer_weights)

  return networks.VictimModel(specs, weights, input_shape)


def save_model(path: PathLike, model: networks.VictimModel, text: bool = False) -> bytes:
  if text:
    data = json.dumps(model_to_manifest(model)).encode()
  else:
    data = encode_model(model)
  utils.write_bytes(path, data)
  return data


def load_model(path: PathLike) -> networks.VictimModel:
  name = os.fspath(path)
  with open(path, 'rb') as f:
    data = f.read()
  if data.startswith(MAGIC):
    return decode_model(data, name)
  try:
    manifest = json.loads(data)
  except (json.JSONDecodeError, UnicodeDecodeError):
    raise errors.FormatError(
        f'{name}: neither a binary nor a text model file') from None
  if not isinstance(manifest, dict):
    raise errors.FormatError(f'{name}: manifest must be a JSON object')
  return model_from_manifest(manifest, name)


## Patches

def save_patch(path: PathLike, patch: np.ndarray):
  """Writes `path` as PGM and a lossless float64 `.npy` sidecar next to it."""
  path = os.fspath(path)
  stem, _ = os.path.splitext(path)
  pgm.write_pgm(stem + '.pgm', patch)
  with utils.atomic_write(stem + '.npy') as f:
    np.save(f, np.asarray(patch, dtype=np.float64), allow_pickle=False)


def load_patch(path: PathLike) -> np.ndarray:
  """Loads a patch from a `.npy` sidecar (exact) or a PGM file (rounded)."""
  path = os.fspath(path)
  if path.endswith('.npy'):
    try:
      patch = np.load(path, allow_pickle=False)
    except ValueError as e:
      raise errors.FormatError(f'{path}: {e}') from None
    if patch.ndim != 2:
      raise errors.FormatError(f'{path}: patch must be 2D, got {patch.shape}')
    return patch.astype(np.float64)
  return pgm.read_pgm(path)


## Transforms

def save_transforms(path: PathLike, transforms: np.ndarray, targets: np.ndarray):
  """JSON file pairing each target with its transform (s, rotation, tx, ty)."""
  document = dict(
      fields=['scale', 'rotation', 'tx', 'ty'],
      targets=np.asarray(targets, dtype=np.float64).tolist(),
      transforms=np.asarray(transforms, dtype=np.float64).tolist(),
  )
  utils.write_text(path, json.dumps(document, indent=2))


def load_transforms(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
  with open(path) as f:
    try:
      document = json.load(f)
      transforms = np.asarray(document['transforms'], dtype=np.float64)
      targets = np.asarray(document['targets'], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
      raise errors.FormatError(f'{path}: malformed transforms file: {e!r}') from None
  if transforms.ndim != 2 or transforms.shape[1] != 4:
    raise errors.FormatError(f'{path}: transforms must be [K, 4]')
  if targets.shape != (len(transforms), 3):
    raise errors.FormatError(f'{path}: need one 3-vector target per transform')
  return transforms, targets


## Optimizer state

def encode_adam_state(state: optimizer.AdamState) -> bytes:
  m = np.ascontiguousarray(state.m, dtype='<f8')
  v = np.ascontiguousarray(state.v, dtype='<f8')
  header = _ADAM_HEADER.pack(
      state.step, m.size, state.learning_rate,
      state.beta1, state.beta2, state.epsilon)
  return ADAM_MAGIC + header + m.tobytes() + v.tobytes()


def decode_adam_state(data: bytes, name: str = '<bytes>') -> optimizer.AdamState:
  if not data.startswith(ADAM_MAGIC):
    raise errors.FormatError(f'{name}: missing {ADAM_MAGIC!r} magic')
  pos = len(ADAM_MAGIC)
  try:
    step, dim, lr, beta1, beta2, epsilon = _ADAM_HEADER.unpack_from(data, pos)
  except struct.error:
    raise errors.FormatError(f'{name}: truncated header') from None
  pos += _ADAM_HEADER.size
  if len(data) != pos + 16 * dim:
    raise errors.FormatError(
        f'{name}: expected {16 * dim} bytes of moments, got {len(data) - pos}')
  m = np.frombuffer(data, dtype='<f8', count=dim, offset=pos).astype(np.float64)
  v = np.frombuffer(data, dtype='<f8', count=dim, offset=pos + 8 * dim).astype(np.float64)
  return optimizer.AdamState(
      step=step, m=m, v=v, learning_rate=lr,
      beta1=beta1, beta2=beta2, epsilon=epsilon)


def save_adam_state(path: PathLike, state: optimizer.AdamState):
  utils.write_bytes(path, encode_adam_state(state))


def load_adam_state(path: PathLike) -> optimizer.AdamState:
  with open(path, 'rb') as f:
    return decode_adam_state(f.read(), os.fspath(path))
