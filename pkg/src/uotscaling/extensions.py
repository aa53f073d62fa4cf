"""Generalized scaling over pushforward maps, and a functional of the total mass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .divergences import DivergenceSpec
from .geometry import CostMatrix, DiscreteSpace, _stabilized_matrix
from .scaling import (
    Plan,
    ScalingOptions,
    SolveReport,
    SolverError,
    _finite_logs,
    _weighted_log_change,
    epsilon_schedule,
)

Prox = Union[DivergenceSpec, Callable]


def _as_prox(spec: Prox) -> Callable:
    if isinstance(spec, DivergenceSpec):
        return spec.proxdiv
    if callable(spec):
        return spec
    raise TypeError("expected a DivergenceSpec or a proxdiv callable")


def pushforward(tk, R, dz, dxk) -> np.ndarray:
    """``(t_# R)_i = sum_{t(l) = i} R_l dz_l / dx_i`` (0 where ``dx_i = 0``)."""
    tk = np.asarray(tk)
    R = np.asarray(R, dtype=float)
    dz = np.asarray(dz, dtype=float)
    dxk = np.asarray(dxk, dtype=float)
    if tk.shape != R.shape or R.shape != dz.shape:
        raise ValueError("map, vector and weights must share the length of Z")
    if tk.size and (tk.min() < 0 or tk.max() >= dxk.shape[0]):
        raise IndexError("map values out of range")
    sums = np.bincount(tk, weights=R * dz, minlength=dxk.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(dxk > 0, sums / np.where(dxk > 0, dxk, 1.0), 0.0)


@dataclass
class PushforwardProblem:
    dz: np.ndarray
    maps: Sequence[np.ndarray]
    dx: Sequence[np.ndarray]
    kernel: np.ndarray
    proxes: Sequence[Prox]
    eps: float

    def __post_init__(self):
        self.dz = np.asarray(self.dz, dtype=float)
        self.kernel = np.asarray(self.kernel, dtype=float)
        self.maps = [np.asarray(t, dtype=np.intp) for t in self.maps]
        self.dx = [np.asarray(w, dtype=float) for w in self.dx]
        if not (len(self.maps) == len(self.dx) == len(self.proxes)):
            raise ValueError("need one map, weight vector and proxdiv per factor")
        if self.kernel.shape != self.dz.shape:
            raise ValueError("kernel must be a vector on Z")
        if np.any(self.kernel < 0) or np.any(self.dz < 0):
            raise ValueError("kernel and dz must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        for k, (t, w) in enumerate(zip(self.maps, self.dx)):
            if t.shape != self.dz.shape:
                raise ValueError(f"map {k} must have the length of Z")
            if t.size and (t.min() < 0 or t.max() >= w.shape[0]):
                raise IndexError(f"map {k} has values out of range")
            if np.unique(t).shape[0] != w.shape[0]:
                raise ValueError(f"map {k} is not surjective")

    @property
    def factors(self) -> int:
        return len(self.maps)

    def coupling(self, scalings) -> np.ndarray:
        R = self.kernel.copy()
        for t, a in zip(self.maps, scalings):
            R = R * np.asarray(a)[t]
        return R


def gamma_k(problem: PushforwardProblem, k: int, scalings) -> np.ndarray:
    """Pushforward by ``t_k`` of ``K`` times all scalings except the k-th."""
    R = problem.kernel.copy()
    for n, (t, a) in enumerate(zip(problem.maps, scalings)):
        if n != k:
            R = R * np.asarray(a)[t]
    return pushforward(problem.maps[k], R, problem.dz, problem.dx[k])


@dataclass
class GeneralizedResult:
    coupling: np.ndarray
    scalings: list
    iterations: int
    converged: bool


def solve_generalized(problem: PushforwardProblem,
                      options: Optional[ScalingOptions] = None) -> GeneralizedResult:
    """Cyclic updates ``a_k <- proxdiv_k(Gamma_k(...))`` (unstabilized)."""
    opts = options or ScalingOptions()
    pb = problem
    proxes = [_as_prox(p) for p in pb.proxes]
    scal = [np.ones(w.shape[0]) for w in pb.dx]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        old = [a.copy() for a in scal]
        for k in range(pb.factors):
            s = gamma_k(pb, k, scal)
            scal[k] = proxes[k](s, np.zeros_like(s), pb.eps)
            if not np.all(np.isfinite(scal[k])):
                raise SolverError("non-finite scaling; use a larger eps", it)
        change = sum(_weighted_log_change(a, b, w) for a, b, w in zip(scal, old, pb.dx))
        if it >= opts.min_iter and change < opts.tol:
            converged = True
            break
    return GeneralizedResult(pb.coupling(scal), scal, it, converged)


def _absorb(tilde, pot, eps):
    pos = tilde > 0
    with np.errstate(divide="ignore"):
        shift = np.where(pos, eps * np.log(np.where(pos, tilde, 1.0)), 0.0)
    return np.where(pos, 1.0, 0.0), pot + shift


def solve_with_mass(F1: Prox, F2: Prox, F3: Prox, C: CostMatrix, X: DiscreteSpace,
                    Y: DiscreteSpace, eps: float,
                    options: Optional[ScalingOptions] = None) -> SolveReport:
    """Three-block scaling with a scalar functional ``F3`` of the total mass.

    Runs in stabilized form: ``z = zt * exp(w/eps)`` carries its own
    potential ``w`` which is folded into the kernel together with ``u, v``.
    ``report.dual`` is not computed (nan).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if C.shape != (len(X), len(Y)):
        raise ValueError("cost shape does not match the spaces")
    opts = options or ScalingOptions()
    p1, p2, p3 = _as_prox(F1), _as_prox(F2), _as_prox(F3)
    c = C.entries
    dx, dy = X.weights, Y.weights
    eps0 = opts.eps0 if opts.eps0 is not None else eps
    schedule = epsilon_schedule(max(eps0, eps), eps, opts.divisions, opts.every)
    e = schedule.eps_at(0)
    u, v, w = np.zeros(len(X)), np.zeros(len(Y)), np.zeros(1)
    at, bt, zt = np.ones(len(X)), np.ones(len(Y)), np.ones(1)

    def build():
        return _stabilized_matrix(c, u, v + w[0], e)

    Kt = build()
    prev = None
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        at = p1(zt[0] * (Kt @ (bt * dy)), u, e)
        bt = p2(zt[0] * (Kt.T @ (at * dx)), v, e)
        mass = np.array([float((at * dx) @ Kt @ (bt * dy))])
        zt = p3(mass, w, e)
        if not (np.all(np.isfinite(at)) and np.all(np.isfinite(bt)) and np.isfinite(zt[0])):
            raise SolverError("overflow despite absorption", it)

        def absorb_all():
            nonlocal at, bt, zt, u, v, w
            at, u = _absorb(at, u, e)
            bt, v = _absorb(bt, v, e)
            zt, w = _absorb(zt, w, e)

        if it in schedule.change_points:
            absorb_all()
            e = schedule.eps_at(it)
            Kt = build()
            prev = None
            continue
        if it > schedule.end:
            if prev is not None:
                change = (_weighted_log_change(at, prev[0], dx)
                          + _weighted_log_change(bt, prev[1], dy)
                          + _weighted_log_change(zt, prev[2], np.ones(1)))
                if it >= opts.min_iter and change < opts.tol:
                    converged = True
                    break
            prev = (at.copy(), bt.copy(), zt.copy())
        if it % opts.absorb_check_every == 0:
            big = max(np.max(np.abs(_finite_logs(at)), initial=0.0),
                      np.max(np.abs(_finite_logs(bt)), initial=0.0),
                      np.max(np.abs(_finite_logs(zt)), initial=0.0))
            if big > opts.absorb_threshold:
                absorb_all()
                Kt = build()
                if prev is not None:
                    prev = (at.copy(), bt.copy(), zt.copy())

    R = zt[0] * at[:, None] * Kt * bt[None, :]
    plan = Plan(X, Y, density=R)
    with np.errstate(divide="ignore"):
        lu = u + e * np.log(at)
        lv = v + e * np.log(bt) + w[0] + e * np.log(zt[0])
    primal = _primal_with_mass(F1, F2, F3, plan, c, e)
    return SolveReport(plan, primal, float("nan"), [], it, converged, lu, lv, e)


def _primal_with_mass(F1, F2, F3, plan, c, e) -> float:
    if not all(isinstance(F, DivergenceSpec) for F in (F1, F2, F3)):
        return float("nan")
    X, Y = plan.X, plan.Y
    R = plan.density
    s1, s2 = plan.first_marginal(), plan.second_marginal()
    mass = np.array([plan.total_mass()])
    val = F1.value(s1, X.weights) + F2.value(s2, Y.weights) + F3.value(mass, np.ones(1))
    W = X.weights[:, None] * Y.weights[None, :]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logK = -c / e
        ent = np.where(R > 0, R * (np.log(R) - logK) - R, 0.0) + np.exp(logK)
    return float(val + e * np.sum(W * ent))
