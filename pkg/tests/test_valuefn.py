import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipiadp import rls
from ipiadp.errors import ConfigurationError, FitQualityWarning, InsufficientExcitationError
from ipiadp.oracle import LinearPlant, discounted_lyapunov
from ipiadp.sysmodels import LINEAR_A, LINEAR_B
from ipiadp.valuefn import (CostSpec, KernelRlsState, QuadraticKernel, bellman_target,
                            eval_value, fit_kernel_batch, fit_kernel_recursive, halfvec,
                            predict_next_state, quad_features, unhalfvec)

COST = CostSpec(np.eye(2), np.eye(1), 0.7)
THETA = rls.stack_theta(LINEAR_A, LINEAR_B)


def spd(seed):
    M = np.random.default_rng(seed).normal(size=(2, 2))
    return M @ M.T + 0.1 * np.eye(2)


def test_eval_value_examples():
    assert eval_value(QuadraticKernel(np.eye(2)), [0, 0]) == 0
    assert eval_value(QuadraticKernel(np.eye(2)), [3, 4]) == 25
    assert eval_value(QuadraticKernel([[2, 1], [1, 2]]), [1, 1]) == 6
    with pytest.raises(ConfigurationError):
        eval_value(QuadraticKernel(np.eye(2)), [1, 2, 3])


def test_predict_next_state_examples():
    x = np.array([0.4, -0.3])
    assert np.array_equal(predict_next_state(x, [0, 0], [0], THETA), x)
    assert np.array_equal(predict_next_state(x, [1, 2], [3], np.zeros((3, 2))), x)
    np.testing.assert_allclose(predict_next_state([1, 0], [0.1, 0], [0.2], THETA), [1, 0],
                               atol=1e-15)
    with pytest.raises(ConfigurationError):
        predict_next_state([1, 0, 0], [0, 0, 0], [0], THETA)


def test_bellman_target_examples():
    assert bellman_target([0, 0], [0], [0, 0], QuadraticKernel(np.eye(2)), COST) == 0
    assert abs(bellman_target([1, 0], [1], [0, 1], QuadraticKernel(np.eye(2)), COST) - 2.7) < 1e-12
    c0 = CostSpec(np.eye(2), np.eye(1), 0.0)
    assert bellman_target([1, 2], [3], [5, 5], QuadraticKernel(np.eye(2)), c0) == 1 + 4 + 9


def test_cost_validation():
    with pytest.raises(ConfigurationError):
        CostSpec([[1, 0], [0, -1]], [[1]], 0.5)
    with pytest.raises(ConfigurationError):
        CostSpec(np.eye(2), [[0]], 0.5)
    with pytest.raises(ConfigurationError):
        CostSpec(np.eye(2), [[1]], 1.2)
    with pytest.raises(ConfigurationError):
        CostSpec([[1, 0.5], [0, 1]], [[1]], 0.5)


def test_lipschitz_constant_bounds_stage_differences():
    r = np.sqrt(2)
    L = COST.lipschitz_constant(r)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        u = rng.normal(size=1)
        assert abs(COST.stage(x, u) - COST.stage(y, u)) <= L * np.linalg.norm(x - y) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.integers(0, 100))
def test_features_reproduce_quadratic_form(x, seed):
    P = spd(seed)
    assert np.isclose(quad_features(x) @ halfvec(P), np.array(x) @ P @ np.array(x), atol=1e-9)
    assert np.array_equal(unhalfvec(halfvec(P), 2), 0.5 * (P + P.T))
    assert eval_value(QuadraticKernel(P), x) >= -1e-12


def sample_states(n=30, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 2))


def test_fit_batch_zero_targets():
    xs = sample_states()
    c0 = CostSpec(np.eye(2) * 1e-300, np.eye(1) * 1e-300, 0.0)
    K = fit_kernel_batch(xs, np.zeros((len(xs), 1)), xs, QuadraticKernel.zeros(2), c0)
    assert np.abs(K.P).max() < 1e-12


def test_fit_batch_interpolates_known_kernel():
    # with gamma = 0 the targets are the stage costs, which are x'(Q + K'RK)x
    xs = sample_states()
    Kg = np.array([[0.3, -0.7]])
    us = xs @ Kg.T
    c0 = CostSpec(np.eye(2), np.eye(1), 0.0)
    fit = fit_kernel_batch(xs, us, xs, QuadraticKernel(np.eye(2) * 99), c0)
    np.testing.assert_allclose(fit.P, np.eye(2) + Kg.T @ Kg, atol=1e-8)
    assert np.array_equal(fit.P, fit.P.T)


def test_fit_batch_gamma_zero_regresses_stage_cost_only():
    xs = sample_states(seed=3)
    us = np.random.default_rng(4).normal(size=(len(xs), 1))
    c0 = CostSpec(np.eye(2), np.eye(1), 0.0)
    a = fit_kernel_batch(xs, us, xs, QuadraticKernel(spd(1)), c0)
    b = fit_kernel_batch(xs, us, -xs, QuadraticKernel(spd(2)), c0)
    Phi = np.array([quad_features(x) for x in xs])
    stage = np.array([c0.stage(x, u) for x, u in zip(xs, us)])
    p, *_ = np.linalg.lstsq(Phi, stage, rcond=None)
    np.testing.assert_allclose(a.P, unhalfvec(p, 2), atol=1e-12)
    np.testing.assert_allclose(a.P, b.P, atol=1e-12)


def test_iterated_fit_matches_lyapunov_oracle():
    K = np.array([[-1.8, -2.7]])  # u = -K x gives A - BK = [[0, 1], [-0.2, -0.3]]
    xs = sample_states(40)
    us = -xs @ K.T
    nxt = xs @ LINEAR_A.T + us @ LINEAR_B.T
    P = QuadraticKernel.zeros(2, 0.7)
    for _ in range(200):
        P = fit_kernel_batch(xs, us, nxt, P, COST)
    ref = discounted_lyapunov(LinearPlant(LINEAR_A, LINEAR_B), K, COST)
    np.testing.assert_allclose(P.P, ref.P, atol=1e-6)


def test_fit_batch_rank_deficiency():
    with pytest.raises(InsufficientExcitationError):
        fit_kernel_batch(sample_states(2), np.zeros((2, 1)), sample_states(2),
                         QuadraticKernel.zeros(2), COST)
    line = np.outer(np.linspace(-1, 1, 20), [1.0, 2.0])
    with pytest.raises(InsufficientExcitationError):
        fit_kernel_batch(line, np.zeros((20, 1)), line, QuadraticKernel.zeros(2), COST)


def test_fit_batch_warns_on_indefinite_result():
    xs = sample_states()
    c0 = CostSpec(np.eye(2), np.eye(1), 0.5)
    with pytest.warns(FitQualityWarning):
        fit_kernel_batch(xs, np.zeros((len(xs), 1)), xs, QuadraticKernel(-10 * np.eye(2)), c0)


def test_projection_clamps_negative_eigenvalues():
    K = QuadraticKernel([[1.0, 0.0], [0.0, -2.0]])
    assert not K.is_psd()
    assert K.projected().is_psd() and np.allclose(K.projected().P, [[1, 0], [0, 0]])


def test_recursive_zero_state_is_noop():
    st0 = KernelRlsState.from_kernel(QuadraticKernel(spd(0), 0.7))
    st1, _ = fit_kernel_recursive(st0, [0, 0], [0.3], [0.1, 0.2], COST)
    assert np.array_equal(st1.p, st0.p)


def test_recursive_zero_residual_is_noop():
    # a kernel solving the evaluation equation exactly for this sample
    x, u, xh = np.array([1.0, 0.0]), np.array([0.0]), np.array([0.0, 0.0])
    st0 = KernelRlsState.from_kernel(QuadraticKernel([[1.0, 0.2], [0.2, 3.0]], 0.7))
    st1, res = fit_kernel_recursive(st0, x, u, xh, COST)
    assert res == 0 and np.array_equal(st1.p, st0.p)


def test_recursive_converges_to_batch():
    # the recursive target uses the running kernel, so its fixed point is the
    # fixed point of repeated batch fits on the same samples
    xs = sample_states(20, seed=5)
    us = -xs @ np.array([[-1.8, -2.7]]).T
    nxt = xs @ LINEAR_A.T + us @ LINEAR_B.T
    batch = QuadraticKernel.zeros(2, 0.7)
    for _ in range(200):
        batch = fit_kernel_batch(xs, us, nxt, batch, COST)
    st_ = KernelRlsState.from_kernel(QuadraticKernel.zeros(2, 0.7))
    for _ in range(200):
        for x, u, xh in zip(xs, us, nxt):
            st_, _ = fit_kernel_recursive(st_, x, u, xh, COST)
    np.testing.assert_allclose(st_.kernel().P, batch.P, atol=1e-4)


def test_kernel_state_roundtrip():
    s = KernelRlsState.from_kernel(QuadraticKernel(spd(0), 0.7), kappa=0.99, cov0=2.0)
    back = KernelRlsState.from_dict(s.to_dict())
    assert np.array_equal(back.p, s.p) and np.array_equal(back.cov, s.cov)
    assert back.cfg.kappa == 0.99
