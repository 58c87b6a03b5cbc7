"""Exceptions raised by flying_patch.

Each error type maps onto one CLI exit status, see cli_lib.
"""

import typing as tp


class PatchAttackError(Exception):
  """Base class for all errors raised by this package."""


class ConfigError(PatchAttackError, ValueError):
  """Invalid or inconsistent configuration."""


class ParameterError(PatchAttackError, ValueError):
  """A numeric parameter is outside its valid domain."""


class FormatError(PatchAttackError, ValueError):
  """A file does not conform to its expected format."""


class DimensionError(PatchAttackError, ValueError):
  """Array shapes do not chain or match."""

  def __init__(self, message: str, expected=None, actual=None):
    if expected is not None or actual is not None:
      message = f'{message} (expected {expected}, got {actual})'
    super().__init__(message)
    self.expected = expected
    self.actual = actual


class NumericError(PatchAttackError, ArithmeticError):
  """Non-finite values where finite ones are required."""


class TargetLookupError(PatchAttackError, LookupError):

  def __init__(self, desired, available: tp.Sequence):
    super().__init__(
        f'Target {tuple(desired)} was not trained; '
        f'available targets: {[tuple(t) for t in available]}')
    self.desired = desired
    self.available = available
