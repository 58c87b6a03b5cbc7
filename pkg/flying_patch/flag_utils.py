"""Dataclass configs <-> JSON config files <-> fancyflags overrides."""

import enum
import dataclasses
import json
import os
import typing as tp

from absl import flags
from absl import logging
import fancyflags as ff
import tree

from flying_patch import errors

T = tp.TypeVar('T')

_SCALAR_ITEMS = {
    bool: ff.Boolean,
    int: ff.Integer,
    float: ff.Float,
    str: ff.String,
}

def strip_optional(t: type) -> type:
  """Optional[X] -> X; anything else is returned unchanged."""
  args = tp.get_args(t)
  if tp.get_origin(t) is tp.Union and len(args) == 2 and type(None) in args:
    return args[0] if args[1] is type(None) else args[1]
  return t


def _is_enum(t: type) -> bool:
  return isinstance(t, type) and issubclass(t, enum.Enum)


def _field_item(field: dataclasses.Field) -> tp.Optional[ff.Item]:
  if field.default_factory is not dataclasses.MISSING:
    default = field.default_factory()
  elif field.default is not dataclasses.MISSING:
    default = field.default
  else:
    default = None

  field_type = strip_optional(field.type)
  if field_type in _SCALAR_ITEMS:
    return _SCALAR_ITEMS[field_type](default)
  if _is_enum(field_type):
    return ff.EnumClass(default=default, enum_class=field_type)
  # Lists (e.g. targets) are config-file only.
  logging.debug('No flag for %s: %s', field.name, field_type)
  return None


def get_flags_from_dataclass(cls: type) -> tree.Structure[ff.Item]:
  """Nested fancyflags items mirroring a (nested) config dataclass."""
  if not dataclasses.is_dataclass(cls):
    raise TypeError(f'{cls} is not a dataclass')

  items = {}
  for field in dataclasses.fields(cls):
    if dataclasses.is_dataclass(field.type):
      items[field.name] = get_flags_from_dataclass(field.type)
      continue
    item = _field_item(field)
    if item is not None:
      items[field.name] = item
  return items


def _coerce(field_type: type, value):
  field_type = strip_optional(field_type)
  if value is None:
    return None
  if _is_enum(field_type) and not isinstance(value, field_type):
    try:
      return field_type(value)
    except ValueError:
      choices = [e.value for e in field_type]
      raise errors.ConfigError(
          f'{value!r} is not one of {choices}') from None
  if field_type is float and isinstance(value, int):
    return float(value)
  return value


def dataclass_from_dict(cls: tp.Type[T], nest: dict, path: str = '') -> T:
  """Recursively construct a dataclass from a nested dict."""
  if not isinstance(nest, dict):
    raise errors.ConfigError(f'{path or cls.__name__} must be a section')

  known = {field.name for field in dataclasses.fields(cls)}
  for key in nest:
    if key not in known:
      raise errors.ConfigError(f'Unknown config field {path}{key}')

  recursed = {}

  for field in dataclasses.fields(cls):
    if field.name not in nest:
      if field.default is not dataclasses.MISSING:
        value = field.default
      elif field.default_factory is not dataclasses.MISSING:
        value = field.default_factory()
      else:
        raise errors.ConfigError(
            f'No value specified for {cls.__name__}.{field.name}')
    else:
      value = nest[field.name]
      if dataclasses.is_dataclass(field.type):
        value = dataclass_from_dict(
            field.type, value, path=f'{path}{field.name}.')
      else:
        try:
          value = _coerce(field.type, value)
        except errors.ConfigError as e:
          raise errors.ConfigError(f'{path}{field.name}: {e}') from None

    recursed[field.name] = value

  return cls(**recursed)


def _to_jsonable(value):
  return tree.map_structure(
      lambda v: v.value if isinstance(v, enum.Enum) else v, value)


def to_dict(config) -> dict:
  """A JSON-compatible nested dict of a dataclass config."""
  return _to_jsonable(dataclasses.asdict(config))


def set_path(nest: dict, path: tp.Sequence[str], value):
  for key in path[:-1]:
    nest = nest.setdefault(key, {})
  nest[path[-1]] = value


def overrides_from_flags(
    prefix: str,
    flag_values: flags.FlagValues = flags.FLAGS,
) -> dict:
  """Collects the fancyflags under `prefix` that were set explicitly."""
  overrides = {}
  for name in flag_values:
    if not name.startswith(prefix + '.'):
      continue
    flag = flag_values[name]
    if flag.present:
      set_path(overrides, name.split('.')[1:], _to_jsonable(flag.value))
  return overrides


def merge(base: dict, overrides: dict) -> dict:
  merged = dict(base)
  for key, value in overrides.items():
    if isinstance(value, dict) and isinstance(merged.get(key), dict):
      merged[key] = merge(merged[key], value)
    else:
      merged[key] = value
  return merged


def read_config_file(path: tp.Union[str, os.PathLike]) -> dict:
  """Reads a JSON config; trial reports are accepted and yield their config."""
  with open(path) as f:
    try:
      nest = json.load(f)
    except json.JSONDecodeError as e:
      raise errors.ConfigError(f'{path} is not valid JSON: {e}') from None
  if not isinstance(nest, dict):
    raise errors.ConfigError(f'{path} must contain a JSON object')
  if nest.get('kind') == 'trial_report':
    nest = nest['config']
  return nest


def load_config(
    cls: tp.Type[T],
    path: tp.Optional[tp.Union[str, os.PathLike]] = None,
    overrides: tp.Optional[dict] = None,
    upgrade: tp.Optional[tp.Callable[[dict], dict]] = None,
) -> T:
  nest = read_config_file(path) if path else {}
  if upgrade is not None:
    nest = upgrade(nest)
  if overrides:
    nest = merge(nest, overrides)
  return dataclass_from_dict(cls, nest)
