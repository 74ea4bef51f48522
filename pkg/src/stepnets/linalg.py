"""Dense float64 kernels with a fixed, input-independent reduction order.

All reductions run strictly left to right (lowest index first), so results
are bit-reproducible across runs and match a naive summation loop exactly.
The batched training path uses BLAS matmul instead; these kernels are the
reference semantics it is tested against.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def _as_matrix(a, name: str) -> Array:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def _as_vector(a, name: str) -> Array:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {a.shape}")
    return a


def matvec(w: Array, x: Array) -> Array:
    """result[i] = sum_j w[i, j] * x[j], summed in ascending j order."""
    w = _as_matrix(w, "w")
    x = _as_vector(x, "x")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: w is {w.shape}, x has length {x.shape[0]}")
    if w.shape[1] == 0:
        return np.zeros(w.shape[0])
    return np.add.accumulate(w * x, axis=1)[:, -1]


def matvec_transposed(w: Array, y: Array) -> Array:
    """result[j] = sum_i w[i, j] * y[i], summed in ascending i order."""
    w = _as_matrix(w, "w")
    y = _as_vector(y, "y")
    if w.shape[0] != y.shape[0]:
        raise ShapeError(f"matvec_transposed: w is {w.shape}, y has length {y.shape[0]}")
    if w.shape[0] == 0:
        return np.zeros(w.shape[1])
    return np.add.accumulate(w * y[:, None], axis=0)[-1, :]


def outer_accumulate(acc: Array, y: Array, x: Array, scale: float) -> Array:
    """acc[i, j] += scale * y[i] * x[j], in place. Returns acc."""
    acc = np.asarray(acc)
    if acc.dtype != np.float64 or acc.ndim != 2:
        raise ShapeError(f"acc must be a float64 matrix, got {acc.dtype} shape {acc.shape}")
    y = _as_vector(y, "y")
    x = _as_vector(x, "x")
    if acc.shape != (y.shape[0], x.shape[0]):
        raise ShapeError(
            f"outer_accumulate: acc is {acc.shape}, expected {(y.shape[0], x.shape[0])}"
        )
    if scale == 0.0:
        return acc
    acc += scale * (y[:, None] * x[None, :])
    return acc


def relu(x: Array) -> Array:
    """max(0, x) element-wise; -0.0 inputs normalize to +0.0."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, 0.0)


def relu_mask(x: Array) -> Array:
    """Derivative of relu: 1 where x > 0, else 0 (subgradient 0 at x = 0)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, 1.0, 0.0)


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: equal seeds give identical draw streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent generators derived from one seed (stable split)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]
