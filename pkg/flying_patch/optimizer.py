"""Projected Adam over flat parameter vectors.

The optimizer is functional: `adam_step` returns new params and a new state
and never mutates its inputs. Projection (patch clamping, transform box
constraints) is left to the caller.
"""

import typing as tp

import numpy as np

from flying_patch import errors

DEFAULT_LEARNING_RATE = 1e-3


class AdamState(tp.NamedTuple):
  step: int
  m: np.ndarray  # first moment
  v: np.ndarray  # second moment
  learning_rate: float
  beta1: float = 0.9
  beta2: float = 0.999
  epsilon: float = 1e-8

  @property
  def dim(self) -> int:
    return len(self.m)


def adam_init(
    dim: int,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
  if dim < 1:
    raise errors.ParameterError(f'dim must be >= 1, got {dim}')
  if not learning_rate > 0:
    raise errors.ParameterError(
        f'learning_rate must be > 0, got {learning_rate}')
  if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
    raise errors.ParameterError(f'betas must be in [0, 1), got {beta1}, {beta2}')
  return AdamState(
      step=0,
      m=np.zeros(dim, dtype=np.float64),
      v=np.zeros(dim, dtype=np.float64),
      learning_rate=float(learning_rate),
      beta1=float(beta1),
      beta2=float(beta2),
      epsilon=float(epsilon),
  )


def check_finite(gradient: np.ndarray, name: str = 'gradient'):
  finite = np.isfinite(gradient)
  if not np.all(finite):
    index = int(np.flatnonzero(~finite)[0])
    raise errors.NumericError(
        f'{name} is non-finite at index {index}: {gradient[index]}')


def adam_step(
    state: AdamState,
    params: np.ndarray,
    gradient: np.ndarray,
) -> tuple[np.ndarray, AdamState]:
  """One bias-corrected Adam update; returns (new_params, new_state)."""
  params = np.asarray(params, dtype=np.float64)
  gradient = np.asarray(gradient, dtype=np.float64)
  if params.shape != (state.dim,) or gradient.shape != (state.dim,):
    raise errors.DimensionError(
        'params and gradient must match the optimizer state',
        expected=(state.dim,), actual=(params.shape, gradient.shape))
  check_finite(gradient)

  b1, b2 = state.beta1, state.beta2
  step = state.step + 1
  m = b1 * state.m + (1 - b1) * gradient
  v = b2 * state.v + (1 - b2) * gradient * gradient

  m_hat = m / (1 - b1 ** step)
  v_hat = v / (1 - b2 ** step)
  new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)

  return new_params, state._replace(step=step, m=m, v=v)


class BlockOptimizer:
  """Adam over a fixed-shape array, flattened on the way in and out.

  Holds the state for one optimized block (the patch, or one transform) so
  that strategies can carry, copy or discard it per candidate.
  """

  def __init__(self, shape: tp.Sequence[int], learning_rate: float,
               state: tp.Optional[AdamState] = None):
    self.shape = tuple(shape)
    self.state = state or adam_init(int(np.prod(self.shape)), learning_rate)

  def apply(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    new_params, self.state = adam_step(
        self.state,
        np.reshape(params, -1),
        np.reshape(gradient, -1))
    return new_params.reshape(self.shape)

  def copy(self) -> 'BlockOptimizer':
    # AdamState arrays are never mutated in place.
    return BlockOptimizer(self.shape, self.state.learning_rate, self.state)
