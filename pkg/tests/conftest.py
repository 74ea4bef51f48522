import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from stepnets import Architecture, forward, init_params
from stepnets.objective import apply_final_tau_dependency

REPO_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = REPO_ROOT / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    if not (DATA_DIR / "mnist").exists():
        pytest.fail(f"MNIST data missing under {DATA_DIR}; see README for setup")
    return DATA_DIR


def make_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", 2051, n, rows, cols) + images.tobytes()


def make_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", 2049, labels.size) + labels.tobytes()


def write_idx(path: Path, payload: bytes, compress: bool = False) -> Path:
    if compress:
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


def random_net(
    rng: np.random.Generator,
    kind: str = "resnet",
    depth: int | None = None,
    width: int | None = None,
    n_in: int | None = None,
    n_out: int | None = None,
    gamma: float = 0.5,
    tau_range: tuple[float, float] = (0.08, 0.18),
):
    """Small random network; tau draws keep a final-tau dependent entry
    positive for fractional runs (sum of free entries stays below 1)."""
    depth = depth if depth is not None else int(rng.integers(2, 6))
    width = width if width is not None else int(rng.integers(2, 9))
    n_in = n_in if n_in is not None else int(rng.integers(2, 9))
    n_out = n_out if n_out is not None else int(rng.integers(2, 9))
    arch = Architecture.uniform(kind, depth, n_in, width, n_out)
    params = init_params(arch, 1.0, rng, gamma)
    params.tau[:] = rng.uniform(*tau_range, size=params.tau.size)
    for b in params.biases:
        b[:] = 0.3 * rng.standard_normal(b.size)
    return params


def kink_free_batch(
    rng: np.random.Generator,
    params,
    batch: int,
    margin: float = 1e-4,
    final_tau_horizon: float | None = None,
    attempts: int = 500,
) -> np.ndarray:
    """Inputs whose pre-activations all stay at least `margin` away from
    the relu kink, so central differences remain valid."""
    from dataclasses import replace

    eval_params = params
    if final_tau_horizon is not None:
        eval_params = replace(params, tau=apply_final_tau_dependency(params.tau, final_tau_horizon))
    n_in = params.arch.widths[0]
    for _ in range(attempts):
        x = rng.standard_normal((batch, n_in))
        cache = forward(eval_params, x)
        closest = min(float(np.abs(z).min()) for z in cache.pre_activations)
        if closest > margin:
            return x
    raise RuntimeError(f"could not find a kink-free batch within {attempts} attempts")
