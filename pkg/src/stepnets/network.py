"""Network definition and forward propagation.

Two layer-function families over a shared skeleton of L layer functions
f^0 .. f^{L-1} acting on feature vectors u^0 (input) .. u^L (logits):

  residual      u^l = u^{l-1} + tau^{l-1} * relu(W^{l-1} u^{l-1} + b^{l-1})
  fractional    u^l = u^{l-1} - sum_{j=1}^{l-2} a_{l-1,j} (u^{j+1} - u^j)
                       + (tau^{l-1})^gamma * G(2-gamma) * relu(W^{l-1} u^{l-1} + b^{l-1})

with the first layer dropping the identity/history terms (it changes width)
and the last layer a plain linear map u^L = W^{L-1} u^{L-1}. The fractional
history weights a_{l,j} come from an L1-type discretization of a Caputo
derivative of order gamma in (0, 1]; gamma = 1 recovers the residual rule.

Forward functions accept a single sample (1-d x, sequential kernels) or a
batch (2-d x, one row per sample, BLAS matmul). Cache arrays mirror the
input's dimensionality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import Array, ShapeError, make_rng, matvec, relu

ARCH_KINDS = ("resnet", "fractional")

CHECKPOINT_VERSION = 1


class TauDegeneracyError(ValueError):
    """A step size is <= 0 where the fractional coefficients need tau > 0."""


@dataclass(frozen=True)
class Architecture:
    """Layer-count and width description of a network.

    widths = (n_0, ..., n_L): n_0 input width, n_L output width, and all
    hidden widths n_1 .. n_{L-1} equal so the identity/skip terms conform.
    """

    kind: str
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}, expected one of {ARCH_KINDS}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if len(self.widths) < 3:
            raise ValueError(f"need depth >= 2 (widths n_0..n_L), got widths {self.widths}")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        hidden = set(self.widths[1:-1])
        if len(hidden) > 1:
            raise ValueError(f"hidden widths must all be equal, got {self.widths[1:-1]}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def depth(self) -> int:
        """Number of layer functions L."""
        return len(self.widths) - 1

    @property
    def hidden_width(self) -> int:
        return self.widths[1]

    @classmethod
    def uniform(cls, kind: str, depth: int, in_dim: int, hidden_width: int, out_dim: int) -> "Architecture":
        if depth < 2:
            raise ValueError(f"depth must be >= 2, got {depth}")
        return cls(kind=kind, widths=(in_dim,) + (hidden_width,) * (depth - 1) + (out_dim,))


@dataclass
class NetworkParams:
    """All learnable variables: weights, biases and the step sizes tau.

    weights[m] has shape (n_{m+1}, n_m) for m = 0..L-1; biases[m] for
    m = 0..L-2 (the output layer is bias-free); tau has length L-1.
    gamma is the fractional order, fixed (never trained).
    """

    arch: Architecture
    weights: list[Array]
    biases: list[Array]
    tau: Array
    gamma: float = 0.5

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            tau=self.tau.copy(),
            gamma=self.gamma,
        )


@dataclass
class ForwardCache:
    """Everything backward needs: u^0..u^L, z^m and relu(z^m) per step."""

    inputs: list[Array]
    pre_activations: list[Array]
    activations: list[Array]

    @property
    def logits(self) -> Array:
        return self.inputs[-1]


@dataclass(frozen=True)
class FracCoeffs:
    """History weights a_{layer, j} for j = j_start .. layer-1.

    step_factor is (tau^layer)^gamma * G(2-gamma), the scale of the
    activation term in the same update.
    """

    layer: int
    coeffs: Array
    step_factor: float
    j_start: int = 1


def gamma_factor(gamma: float) -> float:
    """G(2 - gamma) for gamma in (0, 1]; argument stays in [1, 2)."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    return math.gamma(2.0 - gamma)


def _require_positive_tau(tau: Array) -> None:
    bad = np.flatnonzero(~(tau > 0.0))
    if bad.size:
        raise TauDegeneracyError(
            f"fractional coefficients need every tau > 0; offending indices {bad.tolist()} "
            f"with values {tau[bad].tolist()}"
        )


def frac_coeff(tau: Array, gamma: float, ell: int, j: int) -> float:
    """Single history weight a_{ell, j} = (tau_ell^gamma / tau_j) *
    ((sum_{i=j}^{ell} tau_i)^{1-gamma} - (sum_{i=j+1}^{ell} tau_i)^{1-gamma})."""
    tau = np.asarray(tau, dtype=np.float64)
    if not 0 <= j <= ell < len(tau):
        raise IndexError(f"need 0 <= j <= ell < len(tau), got j={j}, ell={ell}, len={len(tau)}")
    gamma_factor(gamma)  # validates gamma
    _require_positive_tau(tau[j : ell + 1])
    s_j = float(np.add.accumulate(tau[j : ell + 1])[-1])
    s_j1 = float(np.add.accumulate(tau[j + 1 : ell + 1])[-1]) if j + 1 <= ell else 0.0
    return float(tau[ell] ** gamma / tau[j] * (s_j ** (1.0 - gamma) - s_j1 ** (1.0 - gamma)))


def frac_coeffs(tau: Array, gamma: float, ell: int) -> FracCoeffs:
    """All a_{ell, j} used by the update that produces u^{ell+1}.

    The sum starts at j = 1 (the j = 0 term would mix the input width into
    the hidden width), so the active range is j = 1 .. ell-1.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if not 1 <= ell < len(tau):
        raise IndexError(f"need 1 <= ell < len(tau), got ell={ell}, len={len(tau)}")
    gfac = gamma_factor(gamma)
    _require_positive_tau(tau[: ell + 1])
    head = tau[: ell + 1]
    # suffix[k] = tau_k + ... + tau_ell, accumulated right-to-left
    suffix = np.add.accumulate(head[::-1])[::-1]
    js = np.arange(1, ell)
    if js.size:
        pow_j = suffix[js] ** (1.0 - gamma)
        pow_j1 = suffix[js + 1] ** (1.0 - gamma)
        coeffs = tau[ell] ** gamma / head[js] * (pow_j - pow_j1)
    else:
        coeffs = np.zeros(0)
    return FracCoeffs(layer=ell, coeffs=coeffs, step_factor=float(tau[ell] ** gamma * gfac))


def init_params(arch: Architecture, horizon: float, seed, gamma: float = 0.5) -> NetworkParams:
    """Fresh parameters: tau^m = horizon/(L-1) for every m, He-normal
    weights (std sqrt(2/fan_in)), zero biases.

    seed may be an int or a numpy Generator.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(int(seed))
    depth = arch.depth
    weights = []
    biases = []
    for m in range(depth):
        fan_in = arch.widths[m]
        fan_out = arch.widths[m + 1]
        weights.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in))
        if m < depth - 1:
            biases.append(np.zeros(fan_out))
    tau = np.full(depth - 1, horizon / (depth - 1))
    return NetworkParams(arch=arch, weights=weights, biases=biases, tau=tau, gamma=gamma)


def count_params(params: NetworkParams) -> int:
    """Total scalar learnables: every weight and bias entry plus each tau."""
    return (
        sum(w.size for w in params.weights)
        + sum(b.size for b in params.biases)
        + params.tau.size
    )


def _check_input(params: NetworkParams, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be 1-d (sample) or 2-d (batch), got shape {x.shape}")
    if x.shape[-1] != params.arch.widths[0]:
        raise ShapeError(
            f"input width {x.shape[-1]} does not match network input width {params.arch.widths[0]}"
        )
    if len(params.weights) != params.arch.depth or params.tau.size != params.arch.depth - 1:
        raise ShapeError(
            f"params inconsistent with architecture: {len(params.weights)} weight blocks, "
            f"{params.tau.size} step sizes for depth {params.arch.depth}"
        )
    return x


def _affine(w: Array, b: Array, u: Array) -> Array:
    if u.ndim == 1:
        return matvec(w, u) + b
    return u @ w.T + b


def _linear(w: Array, u: Array) -> Array:
    if u.ndim == 1:
        return matvec(w, u)
    return u @ w.T


def forward_resnet(params: NetworkParams, x: Array) -> ForwardCache:
    """Residual forward pass; returns the full per-layer cache."""
    x = _check_input(params, x)
    tau = params.tau
    u = x
    inputs = [u]
    pre = []
    acts = []
    for m in range(params.arch.depth - 1):
        z = _affine(params.weights[m], params.biases[m], u)
        s = relu(z)
        pre.append(z)
        acts.append(s)
        u = tau[m] * s if m == 0 else u + tau[m] * s
        inputs.append(u)
    inputs.append(_linear(params.weights[-1], u))
    return ForwardCache(inputs=inputs, pre_activations=pre, activations=acts)


def forward_fractional(params: NetworkParams, x: Array) -> ForwardCache:
    """Fractional forward pass with full state history; needs every tau > 0."""
    x = _check_input(params, x)
    tau = params.tau
    _require_positive_tau(tau)
    gamma = params.gamma
    gfac = gamma_factor(gamma)
    u = x
    inputs = [u]
    pre = []
    acts = []
    for m in range(params.arch.depth - 1):
        z = _affine(params.weights[m], params.biases[m], u)
        s = relu(z)
        pre.append(z)
        acts.append(s)
        step = (tau[m] ** gamma * gfac) * s
        if m == 0:
            u = step
        else:
            coeffs = frac_coeffs(tau, gamma, m).coeffs
            hist = None
            for j in range(1, m):
                term = coeffs[j - 1] * (inputs[j + 1] - inputs[j])
                hist = term if hist is None else hist + term
            u = u + step if hist is None else (u - hist) + step
        inputs.append(u)
    inputs.append(_linear(params.weights[-1], u))
    return ForwardCache(inputs=inputs, pre_activations=pre, activations=acts)


def forward(params: NetworkParams, x: Array) -> ForwardCache:
    """Dispatch on the architecture kind."""
    if params.arch.kind == "fractional":
        return forward_fractional(params, x)
    return forward_resnet(params, x)


def check_cache(params: NetworkParams, cache: ForwardCache) -> None:
    """Reject a cache whose layer count or widths do not match params."""
    depth = params.arch.depth
    if len(cache.inputs) != depth + 1 or len(cache.pre_activations) != depth - 1:
        raise ShapeError(
            f"cache has {len(cache.inputs)} feature vectors / {len(cache.pre_activations)} "
            f"pre-activations, expected {depth + 1} / {depth - 1} for depth {depth}"
        )
    for l, u in enumerate(cache.inputs):
        if u.shape[-1] != params.arch.widths[l]:
            raise ShapeError(
                f"cache feature {l} has width {u.shape[-1]}, architecture says {params.arch.widths[l]}"
            )


def save_checkpoint(path, params: NetworkParams) -> None:
    """Bit-exact serialization: arch descriptor, gamma, tau, weights, biases."""
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "kind": np.str_(params.arch.kind),
        "activation": np.str_(params.arch.activation),
        "widths": np.asarray(params.arch.widths, dtype=np.int64),
        "gamma": np.float64(params.gamma),
        "tau": params.tau,
    }
    for m, w in enumerate(params.weights):
        payload[f"weight_{m}"] = w
    for m, b in enumerate(params.biases):
        payload[f"bias_{m}"] = b
    np.savez(path, **payload)


def load_checkpoint(path) -> NetworkParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        arch = Architecture(
            kind=str(data["kind"]),
            widths=tuple(int(w) for w in data["widths"]),
            activation=str(data["activation"]),
        )
        depth = arch.depth
        weights = [np.array(data[f"weight_{m}"]) for m in range(depth)]
        biases = [np.array(data[f"bias_{m}"]) for m in range(depth - 1)]
        return NetworkParams(
            arch=arch,
            weights=weights,
            biases=biases,
            tau=np.array(data["tau"]),
            gamma=float(data["gamma"]),
        )
