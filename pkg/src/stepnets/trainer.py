"""Mini-batch SGD with learnable step sizes, positivity projection for the
fractional architecture, and adaptive layer pruning for the residual one.

Pruning rationale: with the residual rule, tau^m = 0 makes layer function
f^m an exact identity, so whenever |tau^m| < epsilon * sum_j |tau^j| the
layer (its weight block, bias and step size) is deleted and training
continues on the smaller network. The first layer and the output layer
change width, so only the skip layers m = 1..L-2 are candidates.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import NUM_CLASSES, Dataset
from .grad import GradientSet
from .linalg import Array, spawn_rngs
from .network import Architecture, NetworkParams, forward, init_params
from .objective import LossBreakdown, Regularization, assemble_objective

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss or gradient appeared; the run is aborted."""


@dataclass
class TrainConfig:
    """Architecture, regularization mode and every hyperparameter of a run."""

    arch: str = "resnet"
    depth: int = 7
    hidden_width: int = 100
    horizon: float = 1.0
    gamma: float = 0.5
    learning_rate: float = 0.05
    batch_size: int = 100
    epochs: int = 200
    seed: int = 0
    reg: Regularization = field(default_factory=Regularization)
    fixed_tau: bool = False
    prune_enabled: bool = False
    prune_epsilon: float = 0.01
    projection_floor: float = 1e-4
    prune_check_interval: int | None = None  # None: once per epoch
    eval_every: int | None = None  # None: once per epoch
    shuffle_partition: bool = False  # epoch-shuffled batches instead of fresh draws

    def validate(self) -> None:
        if self.arch not in ("resnet", "fractional"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden_width}")
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be > 0, got {self.horizon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning rate must be finite, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.prune_epsilon < 1.0:
            raise ConfigError(f"prune epsilon must be in [0, 1), got {self.prune_epsilon}")
        if self.projection_floor <= 0.0:
            raise ConfigError(f"projection floor must be > 0, got {self.projection_floor}")
        if self.prune_enabled and self.arch != "resnet":
            raise ConfigError(
                "adaptive pruning requires the resnet architecture: fractional layers "
                "with tau near 0 are not redundant (the history sum still couples them)"
            )
        for name in ("prune_check_interval", "eval_every"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1 or None, got {value}")


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss: LossBreakdown
    test_accuracy: float | None
    tau_snapshot: Array
    active_layers: int
    wall_time_ms: float


@dataclass
class PruneEvent:
    iteration: int
    removed_current: list[int]
    removed_original: list[int]
    remaining_original: list[int]


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    params: NetworkParams
    prune_events: list[PruneEvent]
    initial_tau: Array
    iters_per_epoch: int
    total_wall_ms: float


def sample_minibatch(rng: np.random.Generator, dataset: Dataset, batch_size: int) -> Array:
    """batch_size indices drawn uniformly without replacement; successive
    calls are independent draws."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot sample from an empty dataset")
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    return rng.choice(n, size=batch_size, replace=False)


def sgd_step(
    params: NetworkParams,
    grads: GradientSet,
    lr: float,
    *,
    fixed_tau: bool = False,
    reg: Regularization | None = None,
) -> NetworkParams:
    """In-place descent step. Under final-tau the dependent last step size
    is recomputed from the others instead of being stepped; under fixed_tau
    the step sizes are not touched at all."""
    for label, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {label}")
    for w, dw in zip(params.weights, grads.d_weights):
        w -= lr * dw
    for b, db in zip(params.biases, grads.d_biases):
        b -= lr * db
    if not fixed_tau:
        if reg is not None and reg.kind == "final-tau":
            params.tau[:-1] -= lr * grads.d_tau[:-1]
            params.tau[-1] = reg.horizon - float(params.tau[:-1].sum())
        else:
            params.tau -= lr * grads.d_tau
    return params


def project_tau_positive(tau: Array, floor: float) -> Array:
    """Entry-wise max(tau, floor); keeps fractional coefficients away from
    the 1/tau_j blow-up."""
    if floor <= 0.0:
        raise ConfigError(f"projection floor must be > 0, got {floor}")
    return np.maximum(np.asarray(tau, dtype=np.float64), floor)


def _apply_tau_constraints(params: NetworkParams, config: TrainConfig) -> None:
    if config.arch != "fractional":
        return
    if config.reg.kind == "final-tau":
        # project the free entries only; the dependent one is recomputed and
        # may go nonpositive, which the forward degeneracy guard will catch
        params.tau[:-1] = project_tau_positive(params.tau[:-1], config.projection_floor)
        params.tau[-1] = config.reg.horizon - float(params.tau[:-1].sum())
    else:
        params.tau = project_tau_positive(params.tau, config.projection_floor)


def prune_check(params: NetworkParams, epsilon: float) -> tuple[NetworkParams, list[int]]:
    """Delete every skip layer m with |tau^m| < epsilon * sum_j |tau^j|.

    Returns (new params, removed layer indices in the pre-prune numbering);
    with no candidates the original params object is returned untouched.
    """
    if params.arch.kind != "resnet":
        raise ConfigError("pruning is only defined for the resnet architecture")
    depth = params.arch.depth
    tau = params.tau
    threshold = epsilon * float(np.abs(tau).sum())
    candidates = [m for m in range(1, depth - 1) if abs(float(tau[m])) < threshold]
    if not candidates:
        return params, []
    max_removable = depth - 2
    if len(candidates) > max_removable:
        by_magnitude = sorted(candidates, key=lambda m: abs(float(tau[m])), reverse=True)
        kept = by_magnitude[: len(candidates) - max_removable]
        log.warning(
            "prune check refused to drop below one hidden layer; keeping layers %s", sorted(kept)
        )
        candidates = sorted(set(candidates) - set(kept))
        if not candidates:
            return params, []
    removed = set(candidates)
    weights = [w for m, w in enumerate(params.weights) if m not in removed]
    biases = [b for m, b in enumerate(params.biases) if m not in removed]
    new_tau = np.array([t for m, t in enumerate(tau) if m not in removed])
    new_depth = depth - len(removed)
    arch = Architecture.uniform(
        params.arch.kind,
        new_depth,
        params.arch.widths[0],
        params.arch.hidden_width,
        params.arch.widths[-1],
    )
    pruned = NetworkParams(arch=arch, weights=weights, biases=biases, tau=new_tau, gamma=params.gamma)
    return pruned, sorted(removed)


def evaluate_accuracy(params: NetworkParams, dataset: Dataset, chunk_size: int = 4096) -> float:
    """Fraction of samples whose argmax logit matches the label; argmax
    ties resolve to the lowest class index."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    hits = 0
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        logits = forward(params, dataset.features[start:stop]).logits
        hits += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[start:stop]))
    return hits / n


def run_training(
    config: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    on_record=None,
) -> TrainResult:
    """Full training run: epochs * (N // batch) iterations, test evaluation
    and prune checks at their configured cadences, one MetricsRecord per
    iteration. Fully replayable from config.seed."""
    config.validate()
    if train_set.n_features != test_set.n_features:
        raise ConfigError(
            f"train/test feature widths differ: {train_set.n_features} vs {test_set.n_features}"
        )
    if config.batch_size > len(train_set):
        raise ConfigError(f"batch size {config.batch_size} exceeds training set size {len(train_set)}")

    arch = Architecture.uniform(
        config.arch, config.depth, train_set.n_features, config.hidden_width, NUM_CLASSES
    )
    init_rng, batch_rng = spawn_rngs(config.seed, 2)
    params = init_params(arch, config.horizon, init_rng, config.gamma)
    initial_tau = params.tau.copy()

    alive = list(range(arch.depth - 1))
    iters_per_epoch = len(train_set) // config.batch_size
    prune_interval = config.prune_check_interval or iters_per_epoch
    eval_interval = config.eval_every or iters_per_epoch

    records: list[MetricsRecord] = []
    events: list[PruneEvent] = []
    start = time.perf_counter()
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        perm = batch_rng.permutation(len(train_set)) if config.shuffle_partition else None
        for k in range(iters_per_epoch):
            iteration += 1
            if perm is not None:
                idx = perm[k * config.batch_size : (k + 1) * config.batch_size]
            else:
                idx = sample_minibatch(batch_rng, train_set, config.batch_size)
            breakdown, grads = assemble_objective(
                params, train_set.features[idx], train_set.labels[idx], config.reg
            )
            if not math.isfinite(breakdown.total):
                raise TrainingDivergedError(f"non-finite loss at iteration {iteration}: {breakdown}")
            sgd_step(params, grads, config.learning_rate, fixed_tau=config.fixed_tau, reg=config.reg)
            _apply_tau_constraints(params, config)
            if config.prune_enabled and iteration % prune_interval == 0:
                params, removed = prune_check(params, config.prune_epsilon)
                if removed:
                    removed_original = [alive[m] for m in removed]
                    for m in reversed(removed):
                        del alive[m]
                    events.append(
                        PruneEvent(iteration, removed, removed_original, list(alive))
                    )
            accuracy = (
                evaluate_accuracy(params, test_set) if iteration % eval_interval == 0 else None
            )
            record = MetricsRecord(
                iteration=iteration,
                epoch=epoch,
                loss=breakdown,
                test_accuracy=accuracy,
                tau_snapshot=params.tau.copy(),
                active_layers=int(params.tau.size),
                wall_time_ms=(time.perf_counter() - start) * 1e3,
            )
            records.append(record)
            if on_record is not None:
                on_record(record)
    return TrainResult(
        records=records,
        params=params,
        prune_events=events,
        initial_tau=initial_tau,
        iters_per_epoch=iters_per_epoch,
        total_wall_ms=(time.perf_counter() - start) * 1e3,
    )
