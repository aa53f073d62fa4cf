import math

import numpy as np
import pytest

from oracles import brute_force_balanced, monotone_rearrangement_cost
from uotscaling import (
    CostMatrix,
    DiscreteSpace,
    DivergenceSpec,
    Plan,
    ScalingOptions,
    SolverError,
    build_cost_quadratic,
    build_cost_wf,
    dual_value,
    epsilon_schedule,
    gibbs_kernel,
    pd_gap,
    primal_value,
    solve_plain,
    solve_stabilized,
    thompson_distance,
)
from uotscaling.scaling import _absorb_one

Eq, KL = DivergenceSpec.equality, DivergenceSpec.kl


def bump(x, c, w):
    return np.exp(-((x - c) ** 2) / (2 * w**2))


def normalized(v, w):
    return v / (v @ w)


def test_singleton_balanced():
    X = DiscreteSpace(np.zeros(1), np.ones(1))
    C = build_cost_quadratic(X, X)
    rep = solve_plain(Eq([1.0]), Eq([1.0]), gibbs_kernel(C, 0.1), X, X, 0.1)
    assert rep.plan.density[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert rep.converged


def test_zero_cost_gives_product_coupling():
    X = DiscreteSpace(np.array([0.0, 1.0]), np.ones(2))
    p = q = np.array([0.5, 0.5])
    K = gibbs_kernel(CostMatrix.from_array(np.zeros((2, 2))), 1.0)
    rep = solve_plain(Eq(p), Eq(q), K, X, X)
    np.testing.assert_allclose(rep.plan.density, np.outer(p, q), atol=1e-14)


def test_plain_close_to_monotone_rearrangement():
    X = DiscreteSpace.interval(50)
    x = X.points[:, 0]
    p = normalized(bump(x, 0.25, 0.08) + 0.02, X.weights)
    q = normalized(bump(x, 0.7, 0.1) + 0.02, X.weights)
    C = build_cost_quadratic(X, X)
    rep = solve_plain(Eq(p), Eq(q), gibbs_kernel(C, 1e-2), X, X,
                      options=ScalingOptions(max_iter=20000, tol=1e-10))
    exact = monotone_rearrangement_cost(x, p * X.weights, x, q * X.weights)
    assert rep.plan.transport_cost(C) == pytest.approx(exact, rel=0.05)
    # fixed point: marginals reproduce the data
    assert np.sum(X.weights * np.abs(rep.plan.first_marginal() - p)) < 1e-6
    assert np.sum(X.weights * np.abs(rep.plan.second_marginal() - q)) < 1e-6


def test_plain_refuses_tiny_eps():
    X = DiscreteSpace.interval(3)
    K = gibbs_kernel(build_cost_quadratic(X, X), 1e-6)
    with pytest.raises(ValueError, match="solve_stabilized"):
        solve_plain(Eq(np.ones(3)), Eq(np.ones(3)), K, X, X)


def test_infeasible_problem_raises():
    # balanced constraints with different total masses: scalings diverge
    X = DiscreteSpace.interval(5)
    K = gibbs_kernel(build_cost_quadratic(X, X), 0.1)
    with pytest.raises(SolverError, match="diverge"):
        solve_plain(Eq(np.ones(5)), Eq(2 * np.ones(5)), K, X, X)


def test_epsilon_schedule_examples():
    s = epsilon_schedule(0.3, 0.3)
    assert s.change_points == [] and s.eps_at(0) == s.eps_at(10**6) == 0.3
    s = epsilon_schedule(1.0, 1e-10, divisions=10)
    assert s.factor == pytest.approx(10.0, rel=1e-12)
    s = epsilon_schedule(1.0, 1e-5, divisions=5, every=100)
    assert s.change_points == [100, 200, 300, 400, 500]
    assert s.eps_at(99) == 1.0
    assert s.eps_at(100) == pytest.approx(0.1)
    assert s.eps_at(500) == 1e-5
    with pytest.raises(ValueError):
        epsilon_schedule(1e-3, 1.0)


def test_thompson_examples():
    r = np.array([0.3, 2.0, 5.0])
    assert thompson_distance(r, r) == 0.0
    assert thompson_distance(2 * r, r) == pytest.approx(math.log(2))
    assert thompson_distance([1.0, 8.0], [2.0, 2.0]) == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        thompson_distance([0.0, 1.0], [1.0, 1.0])


def test_primal_value_singleton():
    X, Y = DiscreteSpace(np.zeros(1), np.ones(1)), DiscreteSpace(np.ones(1), np.ones(1))
    eps = 0.5
    K = gibbs_kernel(build_cost_quadratic(X, Y), eps)
    plan = Plan(X, Y, density=np.ones((1, 1)))
    k = math.exp(-1 / eps)
    assert primal_value(plan, Eq([1.0]), Eq([1.0]), K, eps) == pytest.approx(
        eps * (math.log(1 / k) - 1 + k), rel=1e-14)


@pytest.mark.parametrize("seed", [1, 2])
def test_primal_value_direct_summation(seed):
    rng = np.random.default_rng(seed)
    I, J = 4, 3
    X = DiscreteSpace(rng.random(I), rng.uniform(0.5, 1.5, I))
    Y = DiscreteSpace(rng.random(J), rng.uniform(0.5, 1.5, J))
    eps, lam1, lam2 = 0.3, 0.7, 1.9
    K = gibbs_kernel(build_cost_quadratic(X, Y), eps)
    R = rng.uniform(0.1, 2.0, (I, J))
    p, q = rng.uniform(0.5, 2, I), rng.uniform(0.5, 2, J)
    total = 0.0
    for i in range(I):
        s1 = sum(R[i, j] * Y.weights[j] for j in range(J))
        total += X.weights[i] * lam1 * (s1 * math.log(s1 / p[i]) - s1 + p[i])
    for j in range(J):
        s2 = sum(R[i, j] * X.weights[i] for i in range(I))
        total += Y.weights[j] * lam2 * (s2 * math.log(s2 / q[j]) - s2 + q[j])
    Kd = K.todense()
    for i in range(I):
        for j in range(J):
            r, k = R[i, j], Kd[i, j]
            total += eps * X.weights[i] * Y.weights[j] * (r * math.log(r / k) - r + k)
    got = primal_value(Plan(X, Y, density=R), KL(p, lam1), KL(q, lam2), K, eps)
    assert got == pytest.approx(total, rel=1e-12)


def test_dual_value_zero_potentials():
    X = DiscreteSpace.interval(4)
    K = gibbs_kernel(build_cost_quadratic(X, X), 0.2)
    p = np.full(4, 1.0)
    assert dual_value(np.zeros(4), np.zeros(4), Eq(p), Eq(p), K, X, X, 0.2) == 0.0


def _random_kl_instance(seed, n=5):
    rng = np.random.default_rng(seed)
    X = DiscreteSpace(np.sort(rng.random(n)), np.full(n, 1.0 / n))
    return X, KL(rng.uniform(0.2, 2, n)), KL(rng.uniform(0.2, 2, n))


def test_gap_nonnegative_and_vanishing():
    X, F1, F2 = _random_kl_instance(4)
    eps = 0.1
    K = gibbs_kernel(build_cost_quadratic(X, X), eps)
    rep = solve_plain(F1, F2, K, X, X, eps, ScalingOptions(max_iter=3000, tol=1e-14, gap_every=1))
    gaps = np.array(rep.gap_history)
    assert np.all(gaps >= -1e-9)
    assert gaps[-1] < 1e-10
    # primal and dual values at the end agree with the long-run oracle
    assert rep.primal - rep.dual == pytest.approx(0.0, abs=1e-9)
    direct = primal_value(rep.plan, F1, F2, K, eps)
    assert direct == pytest.approx(rep.primal, rel=1e-9)
    assert dual_value(rep.u, rep.v, F1, F2, K, X, X, eps) == pytest.approx(rep.dual, rel=1e-9)


def test_pd_gap_is_sum_of_fenchel_young_gaps():
    X, F1, F2 = _random_kl_instance(7)
    eps = 0.2
    K = gibbs_kernel(build_cost_quadratic(X, X), eps)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.5, 2, 5), rng.uniform(0.5, 2, 5)
    plan = Plan.from_scalings(a, K, b, X, X)
    u, v = eps * np.log(a), eps * np.log(b)
    g = pd_gap(plan.first_marginal(), plan.second_marginal(), u, v, F1, F2, X, X, eps)
    assert g == pytest.approx(primal_value(plan, F1, F2, K, eps)
                              - dual_value(u, v, F1, F2, K, X, X, eps), rel=1e-10)


def test_absorption_keeps_implied_scalings():
    rng = np.random.default_rng(0)
    tilde = np.exp(rng.uniform(-60, 60, (2, 7)))
    pot = rng.uniform(-1, 1, (2, 7))
    eps_k = np.array([0.01, 0.03])
    before = np.log(tilde) + pot / eps_k[:, None]
    t2, p2 = _absorb_one(tilde, pot, eps_k)
    assert np.all(t2 == 1.0)
    np.testing.assert_allclose(np.log(t2) + p2 / eps_k[:, None], before, rtol=1e-12)


def test_stabilized_matches_plain_at_moderate_eps():
    X, F1, F2 = _random_kl_instance(9, n=20)
    eps = 0.05
    C = build_cost_quadratic(X, X)
    opts = ScalingOptions(max_iter=5000, tol=1e-13)
    plain = solve_plain(F1, F2, gibbs_kernel(C, eps), X, X, eps, opts)
    stab = solve_stabilized(F1, F2, C, X, X, eps, opts)
    np.testing.assert_allclose(stab.plan.density, plain.plan.density, rtol=1e-8, atol=1e-14)
    assert stab.primal == pytest.approx(plain.primal, rel=1e-8)


def test_thompson_contraction_small():
    X, F1, F2 = _random_kl_instance(11, n=30)
    eps = 0.1
    K = gibbs_kernel(build_cost_quadratic(X, X), eps)
    hist = []
    solve_plain(F1, F2, K, X, X, eps, ScalingOptions(max_iter=40, tol=0.0),
                callback=lambda it, a, b: hist.append(a.copy()))
    d = [thompson_distance(hist[k + 1], hist[k]) for k in range(len(hist) - 1)]
    rate = (1.0 / 1.1) ** 2
    for k in range(1, len(d)):
        assert d[k] <= rate * d[k - 1] + 1e-10


def test_entropic_limit_cost_decreases():
    X = DiscreteSpace.interval(40)
    x = X.points[:, 0]
    p = normalized(bump(x, 0.3, 0.1) + 0.05, X.weights)
    q = normalized(bump(x, 0.6, 0.07) + 0.05, X.weights)
    C = build_cost_quadratic(X, X)
    costs = []
    for eps in (1e-1, 1e-2, 1e-3, 1e-4):
        rep = solve_stabilized(Eq(p), Eq(q), C, X, X, eps,
                               ScalingOptions(max_iter=20000, tol=1e-11, eps0=1.0, divisions=5))
        costs.append(rep.plan.transport_cost(C))
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    exact = monotone_rearrangement_cost(x, p * X.weights, x, q * X.weights)
    assert costs[-1] == pytest.approx(exact, abs=1e-3)


def test_stabilized_handles_infinite_costs():
    X = DiscreteSpace(np.array([0.0, 0.3, 1.0]), np.ones(3))
    C = build_cost_wf(X, X, 0.5)
    rep = solve_stabilized(KL(np.ones(3)), KL(np.ones(3)), C, X, X, 1e-4,
                           ScalingOptions(eps0=1.0, divisions=4))
    R = rep.plan.density
    assert np.all(np.isfinite(R))
    assert R[0, 2] == 0.0 and R[2, 0] == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_small_balanced_matches_linear_program(seed):
    # unit weights, so plan entries are masses and <C,R> is the LP objective
    rng = np.random.default_rng(seed)
    I, J = 4, 5
    X = DiscreteSpace(np.arange(I, dtype=float), np.ones(I))
    Y = DiscreteSpace(np.arange(J, dtype=float), np.ones(J))
    c = rng.random((I, J))
    p = rng.uniform(0.5, 2, I)
    q = rng.uniform(0.5, 2, J)
    q *= p.sum() / q.sum()
    C = CostMatrix.from_array(c)
    rep = solve_stabilized(Eq(p), Eq(q), C, X, Y, 1e-4,
                           ScalingOptions(max_iter=50000, tol=1e-12, eps0=1.0))
    assert rep.converged
    assert rep.plan.transport_cost(C) == pytest.approx(brute_force_balanced(c, p, q), abs=1e-6)
