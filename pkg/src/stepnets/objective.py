"""Scalar objective assembly: cross entropy plus step-size regularization.

Five modes: none, l1 (alpha * ||tau||_1), horizon (0.5 * (T - sum tau)^2,
penalty factor fixed at 1), their superposition l1+horizon, and final-tau,
which eliminates the last step size by tau_last = T - sum(other tau) and
differentiates over the reduced variable set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grad import GradientSet, backward
from .linalg import Array
from .network import NetworkParams, forward

REG_KINDS = ("none", "l1", "horizon", "l1+horizon", "final-tau")


@dataclass(frozen=True)
class Regularization:
    """Which penalty/constraint shapes the step sizes, with its parameters."""

    kind: str = "none"
    alpha: float = 0.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularization kind {self.kind!r}, expected one of {REG_KINDS}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")

    @classmethod
    def none(cls) -> "Regularization":
        return cls()

    @classmethod
    def l1(cls, alpha: float) -> "Regularization":
        return cls(kind="l1", alpha=alpha)

    @classmethod
    def time_horizon(cls, horizon: float) -> "Regularization":
        return cls(kind="horizon", horizon=horizon)

    @classmethod
    def l1_plus_horizon(cls, alpha: float, horizon: float) -> "Regularization":
        return cls(kind="l1+horizon", alpha=alpha, horizon=horizon)

    @classmethod
    def final_tau(cls, horizon: float) -> "Regularization":
        return cls(kind="final-tau", horizon=horizon)


@dataclass(frozen=True)
class LossBreakdown:
    data_loss: float
    penalty: float
    total: float

    @classmethod
    def of(cls, data_loss: float, penalty: float) -> "LossBreakdown":
        return cls(data_loss=data_loss, penalty=penalty, total=data_loss + penalty)


def softmax_cross_entropy(logits: Array, label: int) -> tuple[float, Array]:
    """Stable -log softmax(logits)[label] and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"logits must be 1-d, got shape {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shift = logits.max()
    exps = np.exp(logits - shift)
    norm = exps.sum()
    loss = float(np.log(norm) - (logits[label] - shift))
    dlogits = exps / norm
    dlogits[label] -= 1.0
    return loss, dlogits


def _cross_entropy_batch(logits: Array, labels: Array) -> tuple[Array, Array]:
    """Row-wise cross entropy; returns per-sample losses and dlogits."""
    shift = logits.max(axis=1, keepdims=True)
    exps = np.exp(logits - shift)
    norm = exps.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    losses = np.log(norm[:, 0]) - (logits[rows, labels] - shift[:, 0])
    dlogits = exps / norm
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def time_horizon_penalty(tau: Array, horizon: float) -> tuple[float, Array]:
    """0.5 * (horizon - sum tau)^2 and its (constant-entry) tau gradient."""
    if horizon <= 0.0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    tau = np.asarray(tau, dtype=np.float64)
    gap = horizon - float(tau.sum())
    return 0.5 * gap * gap, np.full_like(tau, -gap)


def l1_penalty(tau: Array, alpha: float) -> tuple[float, Array]:
    """alpha * ||tau||_1 with subgradient alpha * sign(tau), sign(0) = 0."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    tau = np.asarray(tau, dtype=np.float64)
    return alpha * float(np.abs(tau).sum()), alpha * np.sign(tau)


def apply_final_tau_dependency(tau: Array, horizon: float) -> Array:
    """Copy of tau with the last entry replaced by horizon - sum(others)."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.size < 2:
        raise ValueError(f"need at least 2 step sizes, got {tau.size}")
    out = tau.copy()
    out[-1] = horizon - float(tau[:-1].sum())
    return out


def assemble_objective(
    params: NetworkParams, features: Array, labels, reg: Regularization
) -> tuple[LossBreakdown, GradientSet]:
    """Mean cross entropy over the batch plus the mode's penalty, with the
    matching GradientSet (penalty terms added once, not per sample).

    Under final-tau the network is evaluated at the dependent tau and the
    returned gradient is over the reduced variable set: each free entry
    absorbs -d/d tau_last and the dependent slot is 0.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
        labels = np.asarray([labels], dtype=np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64)
    batch = features.shape[0]
    if batch == 0:
        raise ValueError("batch must be nonempty")
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {batch}")

    p_eval = params
    if reg.kind == "final-tau":
        p_eval = replace(params, tau=apply_final_tau_dependency(params.tau, reg.horizon))

    cache = forward(p_eval, features)
    losses, dlogits = _cross_entropy_batch(cache.logits, labels)
    data_loss = float(losses.mean())
    grads = backward(p_eval, cache, dlogits / batch)

    penalty = 0.0
    if reg.kind in ("l1", "l1+horizon"):
        value, d_tau = l1_penalty(p_eval.tau, reg.alpha)
        penalty += value
        grads.d_tau += d_tau
    if reg.kind in ("horizon", "l1+horizon"):
        value, d_tau = time_horizon_penalty(p_eval.tau, reg.horizon)
        penalty += value
        grads.d_tau += d_tau
    if reg.kind == "final-tau":
        grads.d_tau[:-1] -= grads.d_tau[-1]
        grads.d_tau[-1] = 0.0

    return LossBreakdown.of(data_loss, penalty), grads
