"""Tensorflow utilities."""

import functools
import typing as tp

import numpy as np
import tensorflow as tf

DTYPE = tf.float64


def constant(x) -> tf.Tensor:
  return tf.constant(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@functools.lru_cache(maxsize=None)
def enable_determinism():
  """Makes TF kernels bit-reproducible. Idempotent."""
  tf.config.experimental.enable_op_determinism()


def vjp(
    fn: tp.Callable[..., tf.Tensor],
    primals: tp.Sequence[tf.Tensor],
    cotangent: tf.Tensor,
) -> list[tf.Tensor]:
  """Vector-Jacobian product of fn at primals.

  Unconnected primals get zero gradients rather than None.
  """
  primals = [tf.convert_to_tensor(p) for p in primals]
  with tf.GradientTape() as tape:
    for p in primals:
      tape.watch(p)
    output = fn(*primals)
  return tape.gradient(
      output, primals,
      output_gradients=cotangent,
      unconnected_gradients=tf.UnconnectedGradients.ZERO)
