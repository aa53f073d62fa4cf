import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import barycenter_h_oracle
from uotscaling import (
    BarycenterProblem,
    DiscreteSpace,
    DivergenceSpec,
    ScalingOptions,
    barycenter_h,
    build_cost_quadratic,
    proxdiv_shared,
    solve_barycenter,
    solve_stabilized,
)
from uotscaling.barycenter import _range_equation, _tv_equation, barycenter_log_h


def test_h_examples():
    assert barycenter_h("equality", [1, 4], [1, 1], 0.3) == pytest.approx(2.0, rel=1e-14)
    assert barycenter_h("kl", [1, 9], [1, 1], 0.5, lam=0.5) == pytest.approx(4.0, rel=1e-14)
    assert barycenter_h("tv", [0, 5], [1, 1], 0.5, lam=1.0) == 0.0
    assert barycenter_h("range", [3, 3, 3], [1, 2, 1], 0.5, beta1=1, beta2=1) == pytest.approx(3.0)


def test_h_examples_match_brute_force():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        h = barycenter_h_oracle("equality", [[1, 4]], [[1, 1]], 0.3)[0]
        assert h == pytest.approx(2.0, rel=1e-6)
        h = barycenter_h_oracle("kl", [[1, 9]], [[1, 1]], 0.5, lam=0.5)[0]
        assert h == pytest.approx(4.0, rel=1e-6)
        assert barycenter_h_oracle("tv", [[0, 5]], [[1, 1]], 0.5, lam=1.0)[0] == 0.0


def test_h_invalid_parameters():
    with pytest.raises(ValueError):
        barycenter_h("kl", [1, 2], [1, -1], 0.5)
    with pytest.raises(ValueError):
        barycenter_h("tv", [1, 2], [1, 1], 0.5, lam=0.0)
    with pytest.raises(ValueError):
        barycenter_h("range", [1, 2], [1, 1], 0.5, beta1=2, beta2=1)
    with pytest.raises(ValueError):
        barycenter_h("equality", [-1, 2], [1, 1], 0.5)


def test_h_zero_cases():
    assert barycenter_h("equality", [0, 3], [1, 1], 0.5) == 0.0
    assert barycenter_h("range", [0, 3], [1, 1], 0.5, beta1=0.5, beta2=2) == 0.0
    assert barycenter_h("kl", [0, 0], [1, 1], 0.5) == 0.0
    # a zero input only pulls when it outweighs the positive ones
    assert barycenter_h("tv", [0, 5, 5], [1, 1, 1], 0.5) > 0


_kinds = st.sampled_from(["equality", "kl", "tv", "range"])


def _params(rng, kind, n):
    s = np.exp(rng.uniform(-3, 3, n))
    if kind == "tv" and n > 1 and rng.random() < 0.3:
        s[0] = 0.0
    alpha = rng.uniform(0.1, 2, n)
    b1 = rng.uniform(0.1, 1)
    return s, alpha, dict(eps=rng.uniform(0.05, 3), lam=rng.uniform(0.1, 3), beta1=b1,
                          beta2=b1 + rng.uniform(0, 2))


@settings(max_examples=80, deadline=None)
@given(kind=_kinds, n=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_permutation_equivariance(kind, n, seed):
    rng = np.random.default_rng(seed)
    s, alpha, kw = _params(rng, kind, n)
    perm = rng.permutation(n)
    h1 = barycenter_h(kind, s, alpha, **kw)
    h2 = barycenter_h(kind, s[perm], alpha[perm], **kw)
    assert h2 == pytest.approx(h1, rel=1e-12, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(["equality", "kl"]), n=st.integers(1, 4),
       c=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31))
def test_scale_equivariance(kind, n, c, seed):
    rng = np.random.default_rng(seed)
    s, alpha, kw = _params(rng, kind, n)
    assert barycenter_h(kind, c * s, alpha, **kw) == pytest.approx(
        c * barycenter_h(kind, s, alpha, **kw), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from(["tv", "range"]), n=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_root_residual(kind, n, seed):
    rng = np.random.default_rng(seed)
    s, alpha, kw = _params(rng, kind, n)
    with np.errstate(divide="ignore"):
        ls = np.log(s)[None]
    t = barycenter_log_h(kind, ls, alpha[None], kw["eps"], kw["lam"], kw["beta1"], kw["beta2"])
    if not np.isfinite(t[0]):
        return
    if kind == "tv":
        f = _tv_equation(ls, alpha[None], kw["eps"], kw["lam"])
    else:
        f = _range_equation(ls, alpha[None], kw["beta1"], kw["beta2"])
    assert abs(f(t[:, None])[0, 0]) <= 1e-12


def test_h_matches_brute_force_small():
    rng = np.random.default_rng(5)
    for kind in ("equality", "kl", "tv", "range"):
        rows = [_params(rng, kind, int(rng.integers(1, 5))) for _ in range(40)]
        S = np.zeros((40, 4))
        A = np.zeros((40, 4))
        for i, (s, a, _) in enumerate(rows):
            S[i, :len(s)], A[i, :len(a)] = s, a
        par = {k: np.array([r[2][k] for r in rows]) for k in ("eps", "lam", "beta1", "beta2")}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ho = barycenter_h_oracle(kind, S, A, par["eps"], par["lam"], par["beta1"], par["beta2"])
        h = np.array([barycenter_h(kind, s, a, **kw) for s, a, kw in rows])
        err = np.abs(h - ho) / np.maximum(np.maximum(h, ho), 1e-300)
        assert err.max() <= 1e-5, kind


def test_proxdiv_shared_examples():
    S = np.array([[0.7, 2.0]])
    f, h = proxdiv_shared("equality", S, np.zeros_like(S), 0.3, 1.0, [1.0])
    np.testing.assert_allclose(h, S[0])
    np.testing.assert_allclose(f, 1.0)

    S = np.array([[1.0], [9.0]])
    f, h = proxdiv_shared("kl", S, np.zeros_like(S), 0.4, 0.4, [1.0, 1.0])
    assert h[0] == pytest.approx(4.0, rel=1e-14)
    np.testing.assert_allclose(f[:, 0], [2.0, 2.0 / 3.0], rtol=1e-14)

    for kind in ("equality", "kl", "tv", "range"):
        f, h = proxdiv_shared(kind, np.zeros((2, 3)), np.zeros((2, 3)), 0.5, 1.0, [1.0, 1.0],
                              beta1=0.5, beta2=2.0)
        assert np.all(h == 0) and np.all(f == 0)
    with pytest.raises(ValueError):
        proxdiv_shared("kl", np.ones((2, 3)), 0.0, 0.5, 1.0, [1.0])


def test_proxdiv_shared_kl_large_potentials():
    # exp(-U/eps) = exp(+-720) is out of range, the factors are not
    S = np.array([[1.0], [2.0]])
    U = np.array([[0.72], [-0.72]])
    eps, lam = 1e-3, 1.0
    f, h = proxdiv_shared("kl", S, U, eps, lam, [1.0, 1.0])
    r = eps / (eps + lam)
    z = [r * (math.log(S[k, 0]) - U[k, 0] / eps) for k in range(2)]
    log_h = math.log(0.5 * (math.exp(z[0]) + math.exp(z[1]))) / r
    assert h[0] == pytest.approx(math.exp(log_h), rel=1e-12)
    for k in range(2):
        expect = math.exp((lam * (log_h - math.log(S[k, 0])) - U[k, 0]) / (lam + eps))
        assert f[k, 0] == pytest.approx(expect, rel=1e-12)


def _line(n=40):
    return DiscreteSpace.interval(n)


def _bump(x, c, w):
    return np.exp(-((x - c) ** 2) / (2 * w**2)) + 1e-3


def test_single_marginal_is_its_own_barycenter():
    # h is the image marginal of the coupling, i.e. p blurred by the kernel
    X = _line()
    p = _bump(X.points[:, 0], 0.4, 0.1)
    C = build_cost_quadratic(X, X)
    pb = BarycenterProblem(X, X, p[None], [1.0], [C], 0.01)
    sol = solve_barycenter(pb, ScalingOptions(tol=1e-12))
    assert sol.converged
    R = sol.couplings[0]
    np.testing.assert_allclose(R.first_marginal(), p, rtol=1e-12)
    np.testing.assert_allclose(sol.barycenter, R.second_marginal(), rtol=1e-12)
    K = np.exp(-C.entries / 0.01)
    blurred = K.T @ (X.weights * p / (K @ X.weights))
    np.testing.assert_allclose(sol.barycenter, blurred, rtol=1e-10)


def test_identical_marginals():
    X = _line()
    p = _bump(X.points[:, 0], 0.5, 0.1)
    C = build_cost_quadratic(X, X)
    eps = 0.001
    pb = BarycenterProblem(X, X, np.stack([p, p]), [0.5, 0.5], [C, C], eps)
    sol = solve_barycenter(pb, ScalingOptions(tol=1e-12))
    # each coupling carries alpha_k * eps = eps / 2
    single = solve_barycenter(BarycenterProblem(X, X, p[None], [1.0], [C], eps / 2),
                              ScalingOptions(tol=1e-12))
    np.testing.assert_allclose(sol.barycenter, single.barycenter, rtol=1e-10)
    # only entropic blur separates h from p
    mass = p @ X.weights
    assert np.sum(X.weights * np.abs(sol.barycenter - p)) < 0.02 * mass


def test_equality_kind_matches_two_marginal_transport():
    # n = 1 with equality on both sides is ordinary balanced transport
    X = _line(30)
    x = X.points[:, 0]
    p, q = _bump(x, 0.3, 0.08), _bump(x, 0.7, 0.08)
    q *= (p @ X.weights) / (q @ X.weights)
    C = build_cost_quadratic(X, X)
    first = [DivergenceSpec.equality(p)]
    pb = BarycenterProblem(X, X, p[None], [1.0], [C], 0.01, first=first)
    sol = solve_barycenter(pb, ScalingOptions(tol=1e-12))
    rep = solve_stabilized(DivergenceSpec.equality(p), DivergenceSpec.equality(sol.barycenter),
                           C, X, X, 0.01, ScalingOptions(tol=1e-12))
    np.testing.assert_allclose(rep.plan.density, sol.couplings[0].density, atol=1e-8)


@pytest.mark.parametrize("kind", ["kl", "equality"])
def test_fixed_point_consistency(kind):
    # at convergence h minimizes sum_k alpha_k Dbar(st_k | h) given the final
    # second marginals st_k: the weighted mean for KL, the common value for equality
    X = _line()
    x = X.points[:, 0]
    ps = np.stack([_bump(x, 0.25, 0.07), 2 * _bump(x, 0.7, 0.1)])
    w = np.array([0.3, 0.7])
    C = build_cost_quadratic(X, X)
    pb = BarycenterProblem(X, X, ps, w, [C, C], 0.01, kind=kind, lam=1.0,
                           first=[DivergenceSpec.kl(p) for p in ps])
    sol = solve_barycenter(pb, ScalingOptions(tol=1e-12, max_iter=50000))
    assert sol.converged
    st_ = np.stack([R.second_marginal() for R in sol.couplings])
    if kind == "kl":
        np.testing.assert_allclose(w @ st_ / w.sum(), sol.barycenter, rtol=1e-6)
    else:
        for s in st_:
            np.testing.assert_allclose(s, sol.barycenter, rtol=1e-6)


def test_weighted_kl_barycenter_mass_between_endpoints():
    X = _line(50)
    x = X.points[:, 0]
    p0, p1 = _bump(x, 0.25, 0.06), 3 * _bump(x, 0.75, 0.06)
    C = build_cost_quadratic(X, X)
    m0, m1 = p0 @ X.weights, p1 @ X.weights
    prev = None
    for t in (0.25, 0.5, 0.75):
        pb = BarycenterProblem(X, X, np.stack([p0, p1]), [1 - t, t], [C, C], 0.005, kind="kl",
                               lam=0.5, first=[DivergenceSpec.kl(p, 0.5) for p in (p0, p1)])
        sol = solve_barycenter(pb, ScalingOptions(tol=1e-10, max_iter=50000))
        m = sol.barycenter @ X.weights
        assert m0 < m < m1
        centre = (sol.barycenter * x) @ X.weights / m
        if prev is not None:
            assert centre > prev
        prev = centre


def test_problem_validation():
    X = _line(5)
    C = build_cost_quadratic(X, X)
    with pytest.raises(ValueError):
        BarycenterProblem(X, X, np.ones((2, 5)), [1.0], [C, C], 0.1)
    with pytest.raises(ValueError):
        BarycenterProblem(X, X, np.ones((2, 5)), [1.0, -1.0], [C, C], 0.1)
    with pytest.raises(ValueError):
        BarycenterProblem(X, X, np.ones((1, 4)), [1.0], [C], 0.1)
