import math

import mpmath
import numpy as np
import pytest

from stepnets import (
    Architecture,
    NetworkParams,
    TauDegeneracyError,
    count_params,
    forward,
    forward_fractional,
    forward_resnet,
    frac_coeff,
    frac_coeffs,
    gamma_factor,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from stepnets.linalg import ShapeError, make_rng

from conftest import random_net


def paper_arch(kind="resnet", width=100):
    return Architecture.uniform(kind, 7, 784, width, 10)


# ---------------------------------------------------------------- oracles


def oracle_coeff(tau, gamma, ell, j):
    """Independent a_{ell,j}: plain Python sums and powers."""
    s1 = sum(float(t) for t in tau[j : ell + 1])
    s2 = sum(float(t) for t in tau[j + 1 : ell + 1])
    return float(tau[ell]) ** gamma / float(tau[j]) * (s1 ** (1 - gamma) - s2 ** (1 - gamma))


def oracle_forward(params, x, kind):
    """Step-by-step per-sample forward with explicit loops, independent of
    the library's vectorized implementation."""
    depth = params.arch.depth
    gamma = params.gamma
    u = [np.array(x, dtype=float)]
    for m in range(depth - 1):
        z = params.weights[m] @ u[m] + params.biases[m]
        s = np.maximum(z, 0.0)
        if kind == "resnet":
            nxt = s * params.tau[m] if m == 0 else u[m] + params.tau[m] * s
        else:
            scale = params.tau[m] ** gamma * math.gamma(2 - gamma)
            nxt = scale * s
            if m >= 1:
                nxt = u[m] + nxt
                for j in range(1, m):
                    nxt = nxt - oracle_coeff(params.tau, gamma, m, j) * (u[j + 1] - u[j])
        u.append(nxt)
    return params.weights[-1] @ u[depth - 1]


# ------------------------------------------------------------ architecture


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(kind="resnet", widths=(4, 5))  # depth < 2
    with pytest.raises(ValueError):
        Architecture(kind="resnet", widths=(4, 5, 6, 3))  # unequal hidden widths
    with pytest.raises(ValueError):
        Architecture(kind="mlp", widths=(4, 5, 3))
    with pytest.raises(ValueError):
        Architecture(kind="resnet", widths=(4, 0, 3))
    with pytest.raises(ValueError):
        Architecture(kind="resnet", widths=(4, 5, 3), activation="tanh")


def test_init_tau_is_horizon_over_layers():
    params = init_params(paper_arch(), 1.0, 0)
    assert params.tau.shape == (6,)
    assert np.array_equal(params.tau, np.full(6, 1.0 / 6.0))

    tiny = init_params(Architecture.uniform("resnet", 2, 3, 4, 2), 1.0, 0)
    assert np.array_equal(tiny.tau, [1.0])


def test_init_weights_and_biases():
    params = init_params(paper_arch(), 1.0, 0)
    assert all(np.all(b == 0.0) for b in params.biases)
    std = params.weights[0].std()
    expected = math.sqrt(2.0 / 784.0)
    assert 0.9 * expected < std < 1.1 * expected
    # deterministic in the seed
    again = init_params(paper_arch(), 1.0, 0)
    assert all(np.array_equal(a, b) for a, b in zip(params.weights, again.weights))


def enumerate_learnables(arch: Architecture) -> int:
    total = 0
    for m in range(arch.depth):
        total += arch.widths[m + 1] * arch.widths[m]  # weight block
        if m < arch.depth - 1:
            total += arch.widths[m + 1]  # bias
            total += 1  # step size
    return total


def test_count_params_paper_architecture():
    params = init_params(paper_arch(), 1.0, 0)
    assert count_params(params) == 130006
    assert params.tau.size == 6


def test_count_params_against_enumeration_oracle():
    small = Architecture(kind="resnet", widths=(2, 3, 2))
    assert count_params(init_params(small, 1.0, 0)) == enumerate_learnables(small)
    assert enumerate_learnables(small) == 2 * 3 + 3 + 3 * 2 + 1  # 16

    doubled = paper_arch(width=200)
    assert count_params(init_params(doubled, 1.0, 0)) == enumerate_learnables(doubled)


# ------------------------------------------------------ frac coefficients


def test_gamma_factor_accuracy_vs_mpmath():
    mpmath.mp.dps = 40
    for g in np.linspace(1e-6, 1.0, 57):
        ours = gamma_factor(float(g))
        ref = float(mpmath.gamma(2.0 - float(g)))
        assert abs(ours - ref) <= 1e-12 * abs(ref)
    assert gamma_factor(1.0) == 1.0
    assert abs(gamma_factor(0.5) - math.sqrt(math.pi) / 2.0) < 1e-15


def test_frac_coeffs_gamma_one_all_zero():
    tau = np.array([0.3, 0.2, 0.5, 0.4])
    for ell in range(1, 4):
        fc = frac_coeffs(tau, 1.0, ell)
        assert np.array_equal(fc.coeffs, np.zeros(ell - 1))
        assert fc.step_factor == tau[ell]


def test_frac_coeff_hand_value():
    # uniform tau = 1, gamma = 0.5: a_{1,0} = sqrt(2) - 1
    tau = np.ones(4)
    assert abs(frac_coeff(tau, 0.5, 1, 0) - (math.sqrt(2.0) - 1.0)) < 1e-15


def test_frac_coeffs_uniform_tau_identity():
    for gamma in (0.25, 0.5, 0.75):
        for h in (0.1, 1.0, 3.0):
            tau = np.full(11, h)
            for ell in range(1, 11):
                fc = frac_coeffs(tau, gamma, ell)
                for j in range(1, ell):
                    expected = (ell - j + 1) ** (1 - gamma) - (ell - j) ** (1 - gamma)
                    assert abs(fc.coeffs[j - 1] - expected) <= 1e-13
                # j = 0 obeys the same identity
                expected0 = (ell + 1) ** (1 - gamma) - ell ** (1 - gamma)
                assert abs(frac_coeff(tau, gamma, ell, 0) - expected0) <= 1e-13


def test_frac_coeffs_uniform_shift_invariance():
    tau = np.full(9, 0.7)
    for gamma in (0.3, 0.6, 0.9):
        for ell in range(2, 6):
            base = frac_coeffs(tau, gamma, ell).coeffs
            shifted = frac_coeffs(tau, gamma, ell + 2).coeffs
            for j in range(1, ell):
                assert abs(base[j - 1] - shifted[j + 2 - 1]) <= 1e-13


def test_frac_coeffs_nonnegative():
    rng = make_rng(21)
    for _ in range(50):
        tau = rng.uniform(0.01, 2.0, size=6)
        gamma = float(rng.uniform(0.05, 1.0))
        for ell in range(1, 6):
            assert np.all(frac_coeffs(tau, gamma, ell).coeffs >= 0.0)


def test_frac_coeffs_matches_independent_oracle():
    rng = make_rng(22)
    tau = rng.uniform(0.05, 0.9, size=7)
    for gamma in (0.3, 0.5, 0.8):
        for ell in range(1, 7):
            fc = frac_coeffs(tau, gamma, ell)
            assert fc.j_start == 1
            assert fc.coeffs.shape == (ell - 1,)
            for j in range(1, ell):
                assert abs(fc.coeffs[j - 1] - oracle_coeff(tau, gamma, ell, j)) < 1e-13
            assert abs(fc.step_factor - tau[ell] ** gamma * math.gamma(2 - gamma)) < 1e-15


def test_frac_coeffs_degeneracy_errors():
    with pytest.raises(TauDegeneracyError):
        frac_coeffs(np.array([0.2, 0.0, 0.1]), 0.5, 2)
    with pytest.raises(TauDegeneracyError):
        frac_coeffs(np.array([0.2, -0.3, 0.1]), 0.5, 2)


# ------------------------------------------------------------ forward pass


def test_forward_resnet_all_tau_zero_collapses():
    params = random_net(make_rng(1), depth=4, width=3, n_in=5, n_out=2)
    params.tau[:] = 0.0
    cache = forward_resnet(params, np.ones(5))
    for u in cache.inputs[1:]:
        assert np.array_equal(u, np.zeros_like(u))


def test_forward_resnet_zero_weights_zero_logits():
    params = random_net(make_rng(2), depth=4, width=3, n_in=5, n_out=2)
    for w in params.weights:
        w[:] = 0.0
    for b in params.biases:
        b[:] = 0.0
    cache = forward_resnet(params, make_rng(3).standard_normal(5))
    assert np.array_equal(cache.logits, np.zeros(2))


def test_forward_resnet_hand_trace():
    arch = Architecture(kind="resnet", widths=(1, 1, 1, 1))
    params = NetworkParams(
        arch=arch,
        weights=[np.ones((1, 1)) for _ in range(3)],
        biases=[np.zeros(1), np.zeros(1)],
        tau=np.array([1.0, 1.0]),
    )
    cache = forward_resnet(params, np.array([1.0]))
    assert np.array_equal(cache.inputs[1], [1.0])  # sigma(1) * 1
    assert np.array_equal(cache.inputs[2], [2.0])  # 1 + sigma(1)
    assert np.array_equal(cache.logits, [2.0])


def test_forward_resnet_matches_scripted_oracle():
    rng = make_rng(4)
    for _ in range(25):
        params = random_net(rng, tau_range=(-0.3, 0.4))
        x = rng.standard_normal(params.arch.widths[0])
        ours = forward_resnet(params, x).logits
        ref = oracle_forward(params, x, "resnet")
        assert np.allclose(ours, ref, atol=1e-12, rtol=1e-12)


def test_forward_resnet_identity_propagation():
    params = random_net(make_rng(5), depth=5, width=4, n_in=3, n_out=2)
    params.tau[1:] = 0.0
    cache = forward_resnet(params, make_rng(6).standard_normal(3))
    depth = params.arch.depth
    for ell in range(2, depth):
        assert np.array_equal(cache.inputs[ell], cache.inputs[1])


def test_forward_fractional_gamma_one_equals_resnet():
    rng = make_rng(7)
    for _ in range(100):
        params = random_net(rng, kind="fractional", gamma=1.0)
        x = rng.standard_normal(params.arch.widths[0])
        frac = forward_fractional(params, x).logits
        res = forward_resnet(params, x).logits
        assert np.max(np.abs(frac - res)) <= 1e-12


def test_forward_fractional_depth3_has_empty_history():
    rng = make_rng(8)
    params = random_net(rng, kind="fractional", depth=3, width=4, n_in=3, n_out=2, gamma=0.5)
    x = rng.standard_normal(3)
    cache = forward_fractional(params, x)
    u1 = cache.inputs[1]
    z1 = params.weights[1] @ u1 + params.biases[1]
    scale = params.tau[1] ** 0.5 * math.gamma(1.5)
    expected = u1 + scale * np.maximum(z1, 0.0)
    assert np.allclose(cache.inputs[2], expected, atol=1e-14)


def test_forward_fractional_hand_trace_depth4():
    arch = Architecture(kind="fractional", widths=(1, 1, 1, 1, 1))
    params = NetworkParams(
        arch=arch,
        weights=[np.ones((1, 1)) for _ in range(4)],
        biases=[np.zeros(1) for _ in range(3)],
        tau=np.ones(3),
        gamma=0.5,
    )
    x = np.array([1.0])
    ours = forward_fractional(params, x).logits
    c = math.gamma(1.5)
    u1 = c * 1.0
    u2 = u1 + c * u1  # empty history
    a21 = math.sqrt(2.0) - 1.0
    u3 = u2 - a21 * (u2 - u1) + c * u2
    assert abs(ours[0] - u3) <= 1e-12
    ref = oracle_forward(params, x, "fractional")
    assert abs(ours[0] - ref[0]) <= 1e-12


def test_forward_fractional_matches_scripted_oracle_and_pins_index_set():
    # depths 4 and 5 pin the history index ranges j = 1..m-1
    rng = make_rng(9)
    for depth in (4, 5):
        for _ in range(10):
            params = random_net(rng, kind="fractional", depth=depth, gamma=0.6)
            x = rng.standard_normal(params.arch.widths[0])
            ours = forward_fractional(params, x).logits
            ref = oracle_forward(params, x, "fractional")
            assert np.allclose(ours, ref, atol=1e-12, rtol=1e-12)
    # coefficient vectors carry exactly the active range
    tau = np.full(4, 0.25)
    assert frac_coeffs(tau, 0.5, 1).coeffs.shape == (0,)  # step for u^2: empty
    assert frac_coeffs(tau, 0.5, 2).coeffs.shape == (1,)  # step for u^3: j = 1
    assert frac_coeffs(tau, 0.5, 3).coeffs.shape == (2,)  # step for u^4: j = 1, 2


def test_forward_fractional_rejects_nonpositive_tau():
    params = random_net(make_rng(10), kind="fractional")
    params.tau[0] = 0.0
    with pytest.raises(TauDegeneracyError):
        forward_fractional(params, np.zeros(params.arch.widths[0]))


def test_forward_batched_matches_per_sample():
    rng = make_rng(11)
    for kind in ("resnet", "fractional"):
        params = random_net(rng, kind=kind, gamma=0.7)
        x = rng.standard_normal((6, params.arch.widths[0]))
        batched = forward(params, x).logits
        for i in range(6):
            single = forward(params, x[i]).logits
            assert np.allclose(batched[i], single, atol=1e-12, rtol=1e-12)


def test_forward_input_width_validation():
    params = random_net(make_rng(12), n_in=5)
    with pytest.raises(ShapeError):
        forward_resnet(params, np.zeros(6))


# ------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = random_net(make_rng(13), kind="fractional", gamma=0.37)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert loaded.arch == params.arch
    assert loaded.gamma == params.gamma
    assert np.array_equal(loaded.tau, params.tau)
    for a, b in zip(loaded.weights, params.weights):
        assert np.array_equal(a, b) and a.dtype == b.dtype
    for a, b in zip(loaded.biases, params.biases):
        assert np.array_equal(a, b)


def test_checkpoint_version_is_checked(tmp_path):
    params = random_net(make_rng(14))
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params)
    blob = dict(np.load(path, allow_pickle=False))
    blob["version"] = np.int64(99)
    np.savez(path, **blob)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
