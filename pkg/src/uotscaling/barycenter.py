"""Unbalanced barycenters through a shared second marginal.

Coupling ``k`` transports ``p_k`` to the barycenter and pays
``lam * alpha_k * D_phi(s_k | h)`` on its second marginal ``s_k``.  The
proxdiv of that shared functional is pointwise: first the barycenter
density ``h`` is found from the stabilized inputs, then each coupling gets
the ordinary single-marginal proxdiv with reference ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .divergences import DivergenceSpec, Kind, proxdiv_log_reference
from .geometry import CostMatrix, DiscreteSpace
from .scaling import Plan, ScalingOptions, run_engine


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _check_params(kind, alpha, eps, lam, beta1, beta2):
    if np.any(np.asarray(alpha) <= 0):
        raise ValueError("weights alpha must be positive")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if kind in (Kind.KL, Kind.TV) and not lam > 0:
        raise ValueError("lam must be positive")
    if kind is Kind.RANGE and not (0 <= beta1 <= beta2 and 0 < beta2 < math.inf):
        raise ValueError("range barycenter needs 0 <= beta1 <= beta2 < inf, beta2 > 0")


def _piecewise_linear_root(f, bps, scale):
    """Leftmost root of nondecreasing piecewise-linear ``f`` per row.

    ``bps`` has shape ``(m, q)`` (row-wise breakpoints, finite).  ``f`` maps
    an ``(m, r)`` array of abscissae to values of the same shape.  Outside
    the breakpoints ``f`` is affine, so the two outer pieces are handled by
    extrapolation.  Values within ``1e-13 * scale`` of zero count as zero,
    so a flat zero piece is not skipped because of roundoff.
    """
    bps = np.sort(bps, axis=1)
    pts = np.concatenate([bps[:, :1] - 1.0, bps, bps[:, -1:] + 1.0], axis=1)
    vals = f(pts)
    m, q = pts.shape
    tol = (1e-13 * scale)[:, None]
    vals = np.where(np.abs(vals) <= tol, 0.0, vals)
    nonneg = vals >= 0
    first = np.where(nonneg.any(axis=1), nonneg.argmax(axis=1), q)
    # pick the bracketing (or outermost) segment
    hi = np.clip(first, 1, q - 1)
    lo = hi - 1
    rows = np.arange(m)
    t0, t1 = pts[rows, lo], pts[rows, hi]
    f0, f1 = vals[rows, lo], vals[rows, hi]
    slope = (f1 - f0) / (t1 - t0)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(slope > 0, t0 - f0 / slope, np.nan)
    # exact zero at a point: that point is the leftmost root
    at = np.minimum(first, q - 1)
    exact = (first < q) & (vals[rows, at] == 0)
    return np.where(exact, pts[rows, at], root)


def _tv_equation(log_s, alpha, eps, lam):
    pos = np.isfinite(log_s)
    a0 = np.sum(np.where(pos, 0.0, alpha), axis=-1)

    def f(t):
        z = (eps / lam) * (t[:, :, None] - np.where(pos, log_s, 0.0)[:, None, :])
        terms = np.where(pos[:, None, :], alpha[:, None, :] * np.clip(z, -1.0, 1.0), 0.0)
        return a0[:, None] + terms.sum(axis=-1)

    return f


def _range_equation(log_s, alpha, beta1, beta2):
    lb2 = math.log(beta2)

    def f(t):
        d = t[:, :, None] - log_s[:, None, :]
        upper = beta2 * np.minimum(d + lb2, 0.0)
        if beta1 > 0:
            lower = beta1 * np.maximum(d + math.log(beta1), 0.0)
        else:
            lower = 0.0
        return np.sum(alpha[:, None, :] * (upper + lower), axis=-1)

    return f


def barycenter_log_h(kind, log_s, alpha, eps, lam=1.0, beta1=0.0, beta2=1.0):
    """Vectorized log of the pointwise barycenter density.

    ``log_s`` has shape ``(m, n)``: ``m`` independent points with ``n``
    inputs each (``-inf`` for zero inputs).  Returns shape ``(m,)``.
    """
    kind = Kind(kind)
    log_s = np.atleast_2d(np.asarray(log_s, dtype=float))
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), log_s.shape)
    _check_params(kind, alpha, eps, lam, beta1, beta2)
    m, n = log_s.shape
    pos = np.isfinite(log_s)
    total = alpha.sum(axis=-1)
    out = np.full(m, -np.inf)

    if kind is Kind.EQUALITY:
        with np.errstate(invalid="ignore"):
            val = np.sum(alpha * log_s, axis=-1) / total
        return np.where(pos.all(axis=-1), val, -np.inf)

    if kind is Kind.KL:
        r = eps / (eps + lam)
        with np.errstate(invalid="ignore"):
            z = np.where(pos, r * log_s + np.log(alpha), -np.inf)
        mx = z.max(axis=-1)
        live = np.isfinite(mx)
        lse = np.full(m, -np.inf)
        lse[live] = mx[live] + np.log(
            np.sum(np.exp(z[live] - mx[live, None]), axis=-1)
        )
        return np.where(live, (lse - np.log(total)) / r, -np.inf)

    if kind is Kind.TV:
        a_pos = np.sum(np.where(pos, alpha, 0.0), axis=-1)
        live = (total - a_pos) < a_pos
        if not live.any():
            return out
        ls, al = log_s[live], alpha[live]
        # breakpoints only from the positive inputs; pad with a positive one
        ref = np.max(np.where(np.isfinite(ls), ls, -np.inf), axis=-1, keepdims=True)
        base = np.where(np.isfinite(ls), ls, ref)
        off = lam / eps
        bps = np.concatenate([base - off, base + off], axis=1)
        scale = al.sum(axis=-1)
        out[live] = _piecewise_linear_root(_tv_equation(ls, al, eps, lam), bps, scale)
        return out

    # range
    live = pos.all(axis=-1) if beta1 > 0 else pos.any(axis=-1)
    if not live.any():
        return out
    ls, al = log_s[live], alpha[live]
    if beta1 == 0:
        # zero inputs impose nothing when beta1 == 0
        al = np.where(np.isfinite(ls), al, 0.0)
        ref = np.max(np.where(np.isfinite(ls), ls, -np.inf), axis=-1, keepdims=True)
        ls = np.where(np.isfinite(ls), ls, ref)
        bps = ls - math.log(beta2)
    else:
        bps = np.concatenate([ls - math.log(beta2), ls - math.log(beta1)], axis=1)
    scale = al.sum(axis=-1) * (beta1 + beta2) * (1.0 + np.abs(bps).max(axis=-1))
    out[live] = _piecewise_linear_root(_range_equation(ls, al, beta1, beta2), bps, scale)
    return out


def barycenter_h(kind, s, alpha, eps, lam=1.0, beta1=0.0, beta2=1.0) -> float:
    """Pointwise minimizer ``h`` of
    ``sum_k alpha_k (eps KLbar(st_k|s_k) + lam Dbar_phi(st_k|h))``."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("inputs must be nonnegative")
    lh = barycenter_log_h(kind, _log(s)[None, :], np.asarray(alpha, float)[None, :],
                          eps, lam, beta1, beta2)[0]
    return float(np.exp(lh))


def _spec(kind, lam, beta1, beta2):
    # parameters only; the reference is passed in log form
    kind = Kind(kind)
    if kind is Kind.RANGE:
        return DivergenceSpec.range([0.0], beta1, beta2)
    return DivergenceSpec(kind, [0.0], lam=lam)


def proxdiv_shared(kind, S, U, eps, lam, alpha, beta1=0.0, beta2=1.0):
    """Scaling factors for the shared-marginal functional.

    ``S`` and ``U`` have shape ``(n, J)``; the stabilized inputs are
    ``S * exp(-U/eps)``.  Returns ``(factors, h)``.
    """
    S = np.asarray(S, dtype=float)
    U = np.broadcast_to(np.asarray(U, dtype=float), S.shape)
    if S.ndim != 2:
        raise ValueError("S must have shape (n, J)")
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (S.shape[0],):
        raise ValueError("one weight per coupling needed")
    with np.errstate(invalid="ignore"):
        log_sigma = np.where(S > 0, _log(S) - U / eps, -np.inf)
    log_h = barycenter_log_h(kind, log_sigma.T, alpha[None, :], eps, lam, beta1, beta2)
    spec = _spec(kind, lam, beta1, beta2)
    factors = np.stack([proxdiv_log_reference(spec, log_h, S[k], U[k], eps)
                        for k in range(S.shape[0])])
    with np.errstate(over="ignore"):
        h = np.exp(log_h)
    return factors, h


@dataclass
class BarycenterProblem:
    X: DiscreteSpace
    Y: DiscreteSpace
    marginals: np.ndarray  # (n, I)
    weights: np.ndarray  # alpha_k
    costs: Sequence[CostMatrix]
    eps: float
    kind: Kind = Kind.EQUALITY
    lam: float = 1.0
    beta1: float = 0.0
    beta2: float = 1.0
    first: Optional[Sequence[DivergenceSpec]] = None

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.marginals = np.atleast_2d(np.asarray(self.marginals, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        n = self.marginals.shape[0]
        if self.weights.shape[0] != n or len(self.costs) != n:
            raise ValueError("need one weight and one cost per marginal")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if self.marginals.shape[1] != len(self.X):
            raise ValueError("marginals must live on X")
        for c in self.costs:
            if c.shape != (len(self.X), len(self.Y)):
                raise ValueError("cost shape does not match the spaces")
        if self.first is None:
            self.first = [DivergenceSpec.equality(p) for p in self.marginals]
        _check_params(self.kind, self.weights, self.eps, self.lam, self.beta1, self.beta2)


@dataclass
class BarycenterSolution:
    couplings: list
    barycenter: np.ndarray
    iterations: int
    converged: bool
    potentials: tuple = field(default=(), repr=False)


def solve_barycenter(problem: BarycenterProblem,
                     options: Optional[ScalingOptions] = None) -> BarycenterSolution:
    """Stabilized n-coupling scaling loop with per-coupling kernels
    ``exp(-c_k / (alpha_k eps))``."""
    pb = problem
    alpha = pb.weights
    n = len(alpha)
    last_h = {}

    def prox1(S, U, e):
        # weighted KL: coupling k is regularized by alpha_k * e
        return np.stack([pb.first[k].proxdiv(S[k], alpha[k] * U[k], alpha[k] * e)
                         for k in range(n)])

    def prox2(S, U, e):
        factors, h = proxdiv_shared(pb.kind, S, U, e, pb.lam, alpha, pb.beta1, pb.beta2)
        last_h["h"] = h
        return factors

    costs = np.stack([c.entries for c in pb.costs])
    res = run_engine(costs, pb.X.weights, pb.Y.weights, prox1, prox2, pb.eps,
                     options, eps_factors=alpha)
    plans = res.state.plans()
    couplings = [Plan(pb.X, pb.Y, density=plans[k]) for k in range(n)]
    return BarycenterSolution(couplings, last_h["h"], res.iterations, res.converged,
                              (res.state.u, res.state.v))
