"""Reverse-mode gradients for both layer-function families.

The adjoints are hand-derived; the fractional rule couples every layer to
the whole state history through the a_{l,j} weights, and each a_{l,j}
depends on every tau inside its partial sums, so d/dtau picks up terms
from the power expressions, the 1/tau_j factor, and the (tau^m)^gamma
step factor. fd_gradient provides the independent oracle the analytic
code is tested against.

Like the forward pass, backward accepts per-sample (1-d) or batched (2-d)
caches; for a batch, the returned gradients are summed over the rows of
dlogits (pass dlogits/B for a batch mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Array, ShapeError, matvec_transposed, outer_accumulate, relu_mask
from .network import (
    ForwardCache,
    NetworkParams,
    TauDegeneracyError,
    check_cache,
    frac_coeffs,
    gamma_factor,
)


@dataclass
class GradientSet:
    """Derivatives of a scalar objective, mirror-shaped to NetworkParams."""

    d_weights: list[Array]
    d_biases: list[Array]
    d_tau: Array

    def items(self):
        for m, w in enumerate(self.d_weights):
            yield f"d_weights[{m}]", w
        for m, b in enumerate(self.d_biases):
            yield f"d_biases[{m}]", b
        yield "d_tau", self.d_tau

    def dot(self, other: "GradientSet") -> float:
        """Euclidean inner product over every scalar entry."""
        total = 0.0
        for (_, a), (_, b) in zip(self.items(), other.items()):
            total += float(np.sum(a * b))
        return total


def zeros_like_params(params: NetworkParams) -> GradientSet:
    return GradientSet(
        d_weights=[np.zeros_like(w) for w in params.weights],
        d_biases=[np.zeros_like(b) for b in params.biases],
        d_tau=np.zeros_like(params.tau),
    )


def _outer_into(acc: Array, y: Array, x: Array) -> None:
    if y.ndim == 1:
        outer_accumulate(acc, y, x, 1.0)
    else:
        acc += y.T @ x


def _linear_t(w: Array, y: Array) -> Array:
    if y.ndim == 1:
        return matvec_transposed(w, y)
    return y @ w


def _sum_rows(g: Array) -> Array:
    return g if g.ndim == 1 else g.sum(axis=0)


def _inner(a: Array, b: Array) -> float:
    return float(np.sum(a * b))


def _check_dlogits(cache: ForwardCache, dlogits: Array) -> Array:
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache.logits.shape:
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match logits {cache.logits.shape}")
    return dlogits


def frac_coeff_tau_grad(tau: Array, gamma: float, ell: int, j: int) -> Array:
    """d a_{ell,j} / d tau_i for every i, as a vector of len(tau).

    a = (tau_ell^gamma / tau_j) * (S_j^{1-gamma} - S_{j+1}^{1-gamma}) with
    S_k = tau_k + ... + tau_ell, so tau_i enters through the leading power
    (i = ell), the 1/tau_j factor (i = j), and both partial sums
    (j <= i <= ell).
    """
    tau = np.asarray(tau, dtype=np.float64)
    if not 0 <= j < ell < len(tau):
        raise IndexError(f"need 0 <= j < ell < len(tau), got j={j}, ell={ell}, len={len(tau)}")
    gamma_factor(gamma)  # validates gamma
    if not np.all(tau[j : ell + 1] > 0.0):
        raise TauDegeneracyError(f"coefficient derivative needs tau > 0 on [{j}, {ell}]")
    s_j = float(np.add.accumulate(tau[j : ell + 1])[-1])
    s_j1 = float(np.add.accumulate(tau[j + 1 : ell + 1])[-1])
    one_m_g = 1.0 - gamma
    base = float(tau[ell] ** gamma / tau[j])
    a = base * (s_j**one_m_g - s_j1**one_m_g)
    grad = np.zeros_like(tau)
    p_j = base * one_m_g * s_j ** (-gamma)
    p_j1 = base * one_m_g * s_j1 ** (-gamma)
    grad[j : ell + 1] += p_j
    grad[j + 1 : ell + 1] -= p_j1
    grad[ell] += gamma * a / tau[ell]
    grad[j] -= a / tau[j]
    return grad


def _backward(params: NetworkParams, cache: ForwardCache, dlogits: Array, fractional: bool) -> GradientSet:
    check_cache(params, cache)
    dlogits = _check_dlogits(cache, dlogits)
    depth = params.arch.depth
    tau = params.tau
    grads = zeros_like_params(params)
    if fractional:
        _frac_guard(tau)
        gamma = params.gamma
        gfac = gamma_factor(gamma)

    # output layer u^L = W^{L-1} u^{L-1}
    _outer_into(grads.d_weights[-1], dlogits, cache.inputs[depth - 1])
    adj = [np.zeros_like(cache.inputs[l]) for l in range(depth)]
    adj[depth - 1] = adj[depth - 1] + _linear_t(params.weights[-1], dlogits)

    # contributions to d_tau, keyed by the step that produced them, so the
    # final accumulation can run in ascending step order
    tau_contribs: list[tuple[int, Array]] = []

    for ell in range(depth - 1, 0, -1):
        lam = adj[ell]
        m = ell - 1
        z = cache.pre_activations[m]
        s = cache.activations[m]
        if fractional:
            step_scale = tau[m] ** gamma * gfac
            step_scale_dtau = gamma * tau[m] ** (gamma - 1.0) * gfac
        else:
            step_scale = tau[m]
            step_scale_dtau = 1.0
        g = lam * relu_mask(z) * step_scale
        _outer_into(grads.d_weights[m], g, cache.inputs[m])
        grads.d_biases[m] += _sum_rows(g)
        if m >= 1:
            adj[m] += lam + _linear_t(params.weights[m], g)
        else:
            adj[0] += _linear_t(params.weights[0], g)

        dtau_step = np.zeros_like(tau)
        dtau_step[m] = step_scale_dtau * _inner(lam, s)
        if fractional and m >= 2:
            coeffs = frac_coeffs(tau, gamma, m).coeffs
            for j in range(1, m):
                a = coeffs[j - 1]
                adj[j + 1] -= a * lam
                adj[j] += a * lam
                d_a = -_inner(lam, cache.inputs[j + 1] - cache.inputs[j])
                dtau_step += d_a * frac_coeff_tau_grad(tau, gamma, m, j)
        tau_contribs.append((m, dtau_step))

    for _, vec in sorted(tau_contribs, key=lambda t: t[0]):
        grads.d_tau += vec
    return grads


def _frac_guard(tau: Array) -> None:
    if not np.all(tau > 0.0):
        raise TauDegeneracyError(
            f"fractional backward needs every tau > 0, got {np.asarray(tau).tolist()}"
        )


def backward_resnet(params: NetworkParams, cache: ForwardCache, dlogits: Array) -> GradientSet:
    """Adjoint of forward_resnet; the skip connection passes the adjoint
    straight through and d tau^m = <adjoint of u^{m+1}, relu(z^m)>."""
    return _backward(params, cache, dlogits, fractional=False)


def backward_fractional(params: NetworkParams, cache: ForwardCache, dlogits: Array) -> GradientSet:
    """Adjoint of forward_fractional, including the history coupling and
    every d a_{l,j} / d tau_i path."""
    return _backward(params, cache, dlogits, fractional=True)


def backward(params: NetworkParams, cache: ForwardCache, dlogits: Array) -> GradientSet:
    if params.arch.kind == "fractional":
        return backward_fractional(params, cache, dlogits)
    return backward_resnet(params, cache, dlogits)


def fd_gradient(params: NetworkParams, loss_fn, h: float = 1e-6) -> GradientSet:
    """Central finite differences of a caller-supplied scalar objective.

    loss_fn(params) -> float is evaluated with one scalar nudged by +-h at
    a time (params are restored afterwards). Coordinates whose perturbed
    loss is non-finite are flagged with NaN in the result.
    """
    if h <= 0.0:
        raise ValueError(f"h must be > 0, got {h}")
    out = zeros_like_params(params)
    sources = list(params.weights) + list(params.biases) + [params.tau]
    targets = list(out.d_weights) + list(out.d_biases) + [out.d_tau]
    for src, dst in zip(sources, targets):
        flat_src = src.ravel()
        flat_dst = dst.ravel()
        for k in range(flat_src.size):
            orig = flat_src[k]
            flat_src[k] = orig + h
            loss_plus = float(loss_fn(params))
            flat_src[k] = orig - h
            loss_minus = float(loss_fn(params))
            flat_src[k] = orig
            if math.isfinite(loss_plus) and math.isfinite(loss_minus):
                flat_dst[k] = (loss_plus - loss_minus) / (2.0 * h)
            else:
                flat_dst[k] = math.nan
    return out
