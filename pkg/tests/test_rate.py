import math

import numpy as np
import pytest
from conftest import random_affine_model
from hypothesis import given, settings
from hypothesis import strategies as st

from selfinteract.errors import InfeasibleError, ValidationError
from selfinteract.model import constant_model, eval_kernel
from selfinteract.rate import (
    ControlPath,
    RateObjective,
    RateOptions,
    discount_weights,
    discretized_cost,
    dv_evaluate,
    dv_rate,
    ipf_project,
    propagate,
    pstar_feasible,
    rate_upper,
    resample_path,
    stationary_of_kernel,
    step_costs,
    terminal_tail_report,
)

TWO_CYCLE = np.array([[0, 1], [1, 0]])
IID_075 = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)


def kl(p, q):
    p, q = np.asarray(p).ravel(), np.asarray(q).ravel()
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def grid_oracle_2x2(m, reference, points=10**6):
    """Minimize KL over the one-parameter family of 2x2 pair measures with both marginals m."""
    lo, hi = max(0.0, m[0] - m[1]), m[0]
    a = np.linspace(lo, hi, points)
    gammas = np.stack([a, m[0] - a, m[0] - a, m[1] - m[0] + a], axis=1)
    ref = reference.ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(gammas > 0, gammas * np.log(gammas / ref), 0.0)
    return terms.sum(axis=1).min()


# -- feasibility ------------------------------------------------------------


def test_two_cycle_balanced_is_feasible():
    res = pstar_feasible([0.5, 0.5], TWO_CYCLE)
    assert res.feasible
    np.testing.assert_allclose(res.witness, [[0, 0.5], [0.5, 0]], atol=1e-12)


def test_two_cycle_unbalanced_is_infeasible():
    res = pstar_feasible([0.3, 0.7], TWO_CYCLE)
    assert not res.feasible and res.witness is None


def test_full_adjacency_product_witness():
    m = np.array([0.2, 0.3, 0.5])
    res = pstar_feasible(m, np.ones((3, 3)))
    assert res.feasible
    np.testing.assert_allclose(res.witness, np.outer(m, m))


def test_witness_has_marginals_on_support():
    adj = np.array([[0, 1, 0], [0, 0, 1], [1, 1, 0]])
    # 0.9 of the 3-cycle plus 0.1 of the 2-cycle between states 1 and 2
    m = np.array([0.3, 0.35, 0.35])
    res = pstar_feasible(m, adj)
    assert res.feasible
    np.testing.assert_allclose(res.witness.sum(axis=0), m, atol=1e-12)
    np.testing.assert_allclose(res.witness.sum(axis=1), m, atol=1e-12)
    assert np.all(res.witness[adj == 0] == 0)


# -- IPF --------------------------------------------------------------------


def test_ipf_product_reference():
    out = ipf_project(np.full((2, 2), 0.25), [0.75, 0.25])
    np.testing.assert_allclose(out, [[0.5625, 0.1875], [0.1875, 0.0625]], atol=1e-14)


def test_ipf_fixed_point_of_scaling():
    ref = np.array([[0.1, 0.2], [0.2, 0.5]])
    np.testing.assert_allclose(ipf_project(ref, [0.3, 0.7]), ref, atol=1e-15)


def test_ipf_qsd_grid_oracle(qsd):
    m = np.array([0.6, 0.4])
    ref = m[:, None] * eval_kernel(qsd, m)
    gamma = ipf_project(ref, m)
    assert abs(kl(gamma, ref) - grid_oracle_2x2(m, ref)) <= 1e-5


def test_ipf_marginals_and_optimality():
    rng = np.random.default_rng(5)
    for _ in range(5):
        ref = rng.dirichlet(np.ones(9)).reshape(3, 3)
        m = rng.dirichlet(np.ones(3))
        gamma = ipf_project(ref, m)
        assert np.abs(gamma.sum(axis=0) - m).sum() <= 1e-10
        assert np.abs(gamma.sum(axis=1) - m).sum() <= 1e-10
        best = kl(gamma, ref)
        # zero-margin directions: e_ab - e_ad - e_cb + e_cd
        for _ in range(100):
            a, c = rng.choice(3, 2, replace=False)
            b, dd = rng.choice(3, 2, replace=False)
            direction = np.zeros((3, 3))
            direction[a, b] += 1
            direction[a, dd] -= 1
            direction[c, b] -= 1
            direction[c, dd] += 1
            limit = np.min(np.where(direction < 0, gamma / -np.where(direction < 0, direction, -1), np.inf))
            other = gamma + rng.uniform(0, 1) * limit * direction
            assert kl(other, ref) >= best - 1e-12


def test_ipf_infeasible_support():
    with pytest.raises(InfeasibleError):
        ipf_project(np.array([[0, 0.5], [0.5, 0]]), [0.3, 0.7])


def test_ipf_accepts_rounding_level_stall():
    # On a cycle-shaped support the marginal must balance exactly; a 1e-13
    # imbalance cannot be scaled away and must not be reported as divergence.
    ref = np.array([[0.5, 0.5, 0], [0, 0, 1.0], [1.0, 0, 0]])
    m = np.array([0.4, 0.3, 0.3])
    m[0] += 2e-13
    m /= m.sum()
    gamma = ipf_project(ref, m, tol=1e-17)
    assert np.abs(gamma.sum(axis=1) - m).sum() < 1e-11
    assert np.abs(gamma.sum(axis=0) - m).sum() < 1e-11


# -- DV rate ----------------------------------------------------------------


def test_dv_iid_uniform(uniform2):
    assert dv_rate([0.75, 0.25], uniform2) == pytest.approx(IID_075, abs=1e-12)
    assert abs(dv_rate([0.75, 0.25], uniform2) - 0.1308) < 5e-5


def test_dv_zero_at_invariant_law(uniform2):
    assert dv_rate([0.5, 0.5], uniform2) == pytest.approx(0.0, abs=1e-15)
    k = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert dv_rate([2 / 3, 1 / 3], constant_model(k)) == pytest.approx(0.0, abs=1e-12)


def test_dv_infinite_off_support():
    assert dv_rate([0.3, 0.7], constant_model([[0, 1], [1, 0]])) == math.inf


def test_dv_matches_grid_on_random_pairs():
    rng = np.random.default_rng(6)
    for _ in range(50):
        model = random_affine_model(rng, 2)
        m = rng.dirichlet(np.ones(2))
        ref = m[:, None] * eval_kernel(model, m)
        assert abs(dv_rate(m, model) - grid_oracle_2x2(m, ref)) <= 1e-5


def test_dv_gradient_finite_differences(qsd):
    m = np.array([0.35, 0.65])
    res = dv_evaluate(m, qsd, gradient=True)
    step = 1e-6
    direction = np.array([1.0, -1.0])
    fd = (dv_rate(m + step * direction, qsd) - dv_rate(m - step * direction, qsd)) / (2 * step)
    assert res.gradient @ direction == pytest.approx(fd, rel=1e-5)


# -- stationary laws --------------------------------------------------------


def test_stationary_examples():
    np.testing.assert_allclose(stationary_of_kernel([[0, 1], [1, 0]]), [0.5, 0.5], atol=1e-13)
    np.testing.assert_allclose(stationary_of_kernel([[0.9, 0.1], [0.2, 0.8]]), [2 / 3, 1 / 3], atol=1e-13)
    ds = [[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]]
    np.testing.assert_allclose(stationary_of_kernel(ds), np.full(3, 1 / 3), atol=1e-13)


def test_stationary_rejects_reducible():
    with pytest.raises(ValidationError):
        stationary_of_kernel([[1, 0], [0.5, 0.5]])


# -- propagation and costs --------------------------------------------------


def test_propagate_constant_at_start():
    m = np.array([0.2, 0.3, 0.5])
    path = ControlPath.constant(3.0, 30, np.tile(m, (3, 1)), m, m)
    traj, pen = propagate(m, path)
    np.testing.assert_allclose(traj, np.tile(m, (31, 1)), atol=1e-12)
    assert pen == 0.0


def test_propagate_infeasible_step():
    path = ControlPath(0.1, [[[0, 1], [1, 0]]], [[0.0, 1.0]], [1.0, 0.0])
    traj, pen = propagate([1.0, 0.0], path)
    np.testing.assert_allclose(traj[1], [math.exp(0.1), 1 - math.exp(0.1)], atol=1e-15)
    assert pen > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_propagate_conserves_mass(seed, n_steps):
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.ones(3), size=n_steps)
    kernels = np.repeat(np.full((1, 3, 3), 1 / 3), n_steps, axis=0)
    for direction in ("forward", "reversed"):
        path = ControlPath(2.0, kernels, mu, rng.dirichlet(np.ones(3)), direction)
        np.testing.assert_allclose(path.trajectory.sum(axis=1), 1.0, atol=1e-12)


def test_exact_step_solves_linear_flow():
    # one step against a fine explicit integration of M' = M - mu
    m, mu, h = np.array([0.6, 0.4]), np.array([0.5, 0.5]), 0.3
    path = ControlPath(h, [[[0.5, 0.5], [0.5, 0.5]]], [mu], m)
    x = m.copy()
    dt = h / 200_000
    for _ in range(200_000):
        x = x + dt * (x - mu)
    np.testing.assert_allclose(path.trajectory[1], x, atol=1e-6)


def test_step_cost_zero_when_following_model(qsd):
    m = np.array([0.4, 0.6])
    kernels, stationary, traj = [], [], m
    # follow G along a short forward path
    for _ in range(5):
        k = eval_kernel(qsd, traj)
        kernels.append(k)
        stationary.append(stationary_of_kernel(k))
        traj = math.exp(0.1) * traj - math.expm1(0.1) * stationary[-1]
    path = ControlPath(0.5, kernels, stationary, m)
    assert np.all(np.abs(step_costs(path, path.trajectory, qsd)) <= 1e-14)


def test_constant_dv_control_cost(uniform2):
    m = np.array([0.75, 0.25])
    gamma = dv_evaluate(m, uniform2).gamma
    path = ControlPath.from_pairs(20.0, np.repeat(gamma[None], 200, axis=0), m)
    cost = discretized_cost(path, path.trajectory, uniform2)
    assert cost == pytest.approx(IID_075 * (1 - math.exp(-20.0)), rel=1e-10)


def test_empty_path_cost(uniform2):
    path = ControlPath(1.0, np.zeros((0, 2, 2)), np.zeros((0, 2)), [0.5, 0.5])
    assert discretized_cost(path, path.trajectory, uniform2) == 0.0


def test_discount_weights_sum():
    w = discount_weights(5.0, 50)
    assert w.sum() == pytest.approx(1 - math.exp(-5.0), rel=1e-14)


def test_tail_report_examples():
    assert terminal_tail_report(1.0, math.exp(-1)) == pytest.approx(1.0)
    assert terminal_tail_report(10.0, 0.01) == pytest.approx(math.exp(-9) * math.log(100))
    values = [terminal_tail_report(t, 0.01) for t in (1, 2, 5, 10, 40)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(ValidationError):
        terminal_tail_report(0.0, 0.5)


# -- objective gradient -----------------------------------------------------


def gradient_mismatch(obj, theta, step=1e-5):
    value, grad = obj.evaluate(theta, gradient=True)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        fd[i] = (obj.evaluate(theta + e) - obj.evaluate(theta - e)) / (2 * step)
    return np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12)


def random_gradient_instance(rng):
    model = random_affine_model(rng, 3)
    m = rng.dirichlet(2 * np.ones(3))
    obj = RateObjective(m, model, T=1.0, N=10, options=RateOptions(floor=1e-3))
    # start near the constant DV control so that the trajectory stays feasible
    gamma = dv_evaluate(m, model).gamma
    kernel = gamma / gamma.sum(axis=1, keepdims=True)
    theta = obj.logits_for(np.repeat(kernel[None], 10, axis=0)) + 0.05 * rng.standard_normal(obj.size)
    return obj, theta


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(5):
        obj, theta = random_gradient_instance(rng)
        assert gradient_mismatch(obj, theta) <= 1e-4


# -- rate_upper -------------------------------------------------------------


def test_rate_upper_infeasible_target():
    model = constant_model([[0, 1], [1, 0]])
    cert = rate_upper([0.3, 0.7], model, T=2.0, N=10)
    assert cert.value == math.inf and cert.path is None


def test_certificate_consistency(qsd):
    cert = rate_upper([0.3, 0.7], qsd, T=4.0, N=20)
    path = cert.path
    assert cert.value == pytest.approx(cert.head_cost + cert.tail_bound, abs=1e-15)
    head = discretized_cost(path, path.trajectory, qsd)
    end = np.maximum(path.end, 0)
    tail = math.exp(-4.0) * dv_rate(end / end.sum(), qsd)
    assert abs(head + tail - cert.value) <= 1e-10
    np.testing.assert_allclose(path.trajectory[0], [0.3, 0.7])
    assert path.trajectory.min() >= -1e-8
    eta = path.pair_controls
    np.testing.assert_allclose(eta.sum(axis=1), eta.sum(axis=2), atol=1e-12)
    assert np.all(eta[:, ~qsd.adjacency.mask] == 0)


def test_rate_upper_not_above_dv(qsd):
    for m in ([0.8, 0.2], [0.3, 0.7]):
        cert = rate_upper(m, qsd, T=4.0, N=20)
        assert cert.value <= dv_rate(m, qsd) + 1e-12


def test_warm_start_extension_reproduces_value(qsd):
    m = [0.8, 0.2]
    coarse = rate_upper(m, qsd, T=4.0, N=20)
    longer = resample_path(coarse.path, qsd, 8.0, 40)
    head = discretized_cost(longer, longer.trajectory, qsd)
    tail = math.exp(-8.0) * dv_rate(np.clip(longer.end, 0, None) / np.clip(longer.end, 0, None).sum(), qsd)
    assert head + tail == pytest.approx(coarse.value, abs=1e-10)


def test_warm_start_must_match_target(qsd):
    coarse = rate_upper([0.8, 0.2], qsd, T=2.0, N=10)
    with pytest.raises(ValidationError):
        rate_upper([0.7, 0.3], qsd, T=2.0, N=10, warm_start=coarse.path)


@pytest.mark.parametrize("m", [(0.8, 0.2), (0.3, 0.7), (0.5, 0.5)])
def test_monotone_refinement(qsd, m):
    values = []
    cert = rate_upper(m, qsd, T=8.0, N=40)
    values.append(cert.value)
    for N in (80, 160):
        cert = rate_upper(m, qsd, T=8.0, N=N, warm_start=cert.path)
        values.append(cert.value)
    # longer horizon at the same step length
    cert = rate_upper(m, qsd, T=12.0, N=240, warm_start=cert.path)
    values.append(cert.value)
    assert all(b <= a + 1e-4 for a, b in zip(values, values[1:]))
