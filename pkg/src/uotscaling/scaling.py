"""Scaling (generalized Sinkhorn) iterations, plain and log-stabilized.

``solve_plain`` runs the textbook alternating updates on a fixed Gibbs
kernel (dense or separable).  ``solve_stabilized`` keeps the scalings in
the redundant form ``a = a_tilde * exp(u/eps)`` and periodically absorbs
``a_tilde`` into the potential ``u`` so very small ``eps`` stay in floating
range.  The stabilized loop is written for ``n`` couplings at once; the
barycenter and two-species drivers reuse it through :func:`run_engine`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .divergences import EXP_CLAMP
from .geometry import CostMatrix, DiscreteSpace, Kernel, _stabilized_matrix

logger = logging.getLogger(__name__)

PLAIN_EPS_FLOOR = 1e-5
# log-scalings this large mean proxdiv outputs sit at their saturation bound
DIVERGED_LOG = EXP_CLAMP - 10.0


class SolverError(RuntimeError):
    """Raised when a scaling iteration cannot proceed."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


@dataclass
class ScalingOptions:
    max_iter: int = 10000
    tol: float = 1e-8
    gap_tol: Optional[float] = None
    absorb_threshold: float = 50.0
    absorb_check_every: int = 10
    # epsilon schedule; eps0=None means start directly at the target
    eps0: Optional[float] = None
    divisions: int = 10
    every: int = 100
    # record the primal-dual gap every `gap_every` iterations (0: never)
    gap_every: int = 0
    min_iter: int = 1


@dataclass(frozen=True)
class EpsilonSchedule:
    """Geometric decrease from ``eps0`` to ``eps_target``, one division
    every ``every`` iterations."""

    eps0: float
    eps_target: float
    divisions: int = 10
    every: int = 100

    @property
    def factor(self) -> float:
        if self.divisions == 0 or self.eps0 == self.eps_target:
            return 1.0
        return (self.eps0 / self.eps_target) ** (1.0 / self.divisions)

    @property
    def change_points(self) -> list:
        if self.factor == 1.0:
            return []
        return [self.every * (k + 1) for k in range(self.divisions)]

    @property
    def end(self) -> int:
        pts = self.change_points
        return pts[-1] if pts else 0

    def eps_at(self, iteration: int) -> float:
        """Value in force during ``iteration`` (0-based)."""
        if self.factor == 1.0:
            return self.eps_target
        k = min(iteration // self.every, self.divisions)
        if k == self.divisions:
            return self.eps_target
        return self.eps0 / self.factor**k


def epsilon_schedule(eps0, eps_target, divisions=10, every=100) -> EpsilonSchedule:
    if not (eps0 >= eps_target > 0):
        raise ValueError("need eps0 >= eps_target > 0")
    if divisions < 0 or every < 1:
        raise ValueError("divisions must be >= 0 and every >= 1")
    return EpsilonSchedule(float(eps0), float(eps_target), int(divisions), int(every))


class Plan:
    """Coupling density ``R`` on ``X x Y``.

    Built either from a dense array or from scalings ``a_i K_ij b_j`` (the
    latter keeps separable kernels implicit).
    """

    def __init__(self, X: DiscreteSpace, Y: DiscreteSpace, density=None,
                 a=None, kernel: Optional[Kernel] = None, b=None):
        self.X, self.Y = X, Y
        self._density = None if density is None else np.asarray(density, dtype=float)
        self.a, self.kernel, self.b = a, kernel, b
        if self._density is None and kernel is None:
            raise ValueError("need a density or scalings")

    @classmethod
    def from_scalings(cls, a, kernel, b, X, Y):
        return cls(X, Y, a=np.asarray(a, float), kernel=kernel, b=np.asarray(b, float))

    @property
    def density(self) -> np.ndarray:
        if self._density is None:
            self._density = self.a[:, None] * self.kernel.todense() * self.b[None, :]
        return self._density

    def matvec(self, f) -> np.ndarray:
        """``R f`` (plain sum over the second index, no weights)."""
        f = np.asarray(f, dtype=float)
        if self._density is None and self.kernel.separable:
            return self.a * self.kernel.apply(self.b * f)
        return self.density @ f

    def rmatvec(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if self._density is None and self.kernel.separable:
            return self.b * self.kernel.apply_t(self.a * g)
        return self.density.T @ g

    def first_marginal(self) -> np.ndarray:
        """``R dy``."""
        return self.matvec(self.Y.weights)

    def second_marginal(self) -> np.ndarray:
        """``R^T dx``."""
        return self.rmatvec(self.X.weights)

    def total_mass(self) -> float:
        return float(self.X.weights @ self.first_marginal())

    def transport_cost(self, C: CostMatrix) -> float:
        """``sum_ij C_ij R_ij dx_i dy_j`` (zero mass on infinite cost counts 0)."""
        R = self.density
        c = C.entries
        w = self.X.weights[:, None] * self.Y.weights[None, :]
        mask = R > 0
        return float(np.sum(c[mask] * R[mask] * w[mask]))

    def entropy(self, K: Kernel) -> float:
        """``sum_ij KLbar(R_ij | K_ij) dx_i dy_j``."""
        return _kl_dense(self.density, K.todense(), self.X.weights, self.Y.weights)


def _kl_dense(R, K, dx, dy):
    w = dx[:, None] * dy[None, :]
    if np.any((R > 0) & (K == 0) & (w > 0)):
        return math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(R > 0, R * np.log(R / np.where(K > 0, K, 1.0)) - R + K, K)
    return float(np.sum(t * w))


@dataclass
class SolveReport:
    plan: Plan
    primal: float
    dual: float
    gap_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    eps: Optional[float] = None


# --------------------------------------------------------------------------
# objective values


def primal_value(plan: Plan, F1, F2, K: Kernel, eps: float, penalized=False) -> float:
    """``F1(R dy) + F2(R^T dx) + eps KL(R|K)``."""
    pe = eps if penalized else None
    f1 = F1.value(plan.first_marginal(), plan.X.weights, penalty_eps=pe)
    f2 = F2.value(plan.second_marginal(), plan.Y.weights, penalty_eps=pe)
    if math.isinf(f1) or math.isinf(f2):
        return math.inf
    return f1 + f2 + eps * plan.entropy(K)


def dual_value(u, v, F1, F2, K: Kernel, X: DiscreteSpace, Y: DiscreteSpace,
               eps: float, penalized=False) -> float:
    """``-F1*(-u) - F2*(-v) - eps <exp((u+v)/eps) - 1, K>``."""
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    pe = eps if penalized else None
    c1 = F1.conjugate_value(-u, X.weights, penalty_eps=pe)
    c2 = F2.conjugate_value(-v, Y.weights, penalty_eps=pe)
    Kd = K.todense()
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp((u[:, None] + v[None, :]) / eps)
        t = np.where(Kd > 0, (e - 1.0) * Kd, 0.0)
    w = X.weights[:, None] * Y.weights[None, :]
    return -c1 - c2 - eps * float(np.sum(t * w))


def _fy_gap(F, s, u, w, eps, penalized):
    """Fenchel-Young gap ``F(s) + F*(-u) + <u, s>_w`` (>= 0)."""
    pe = eps if penalized else None
    val = F.value(s, w, penalty_eps=pe)
    conj = F.conjugate_value(-u, w, penalty_eps=pe)
    if math.isinf(val) or math.isinf(conj):
        return math.inf
    with np.errstate(invalid="ignore"):
        lin = np.where(s > 0, u * s, 0.0)
    return val + conj + float(np.sum(w * lin))


def pd_gap(s1, s2, u, v, F1, F2, X, Y, eps, penalized=True) -> float:
    """Primal minus dual at a scaling iterate.

    With ``R = exp(u/eps) K exp(v/eps)``, ``s1 = R dy`` and ``s2 = R^T dx``
    the entropic terms cancel and the gap is the sum of the two
    Fenchel-Young gaps, which is how it is evaluated here.
    """
    return _fy_gap(F1, s1, u, X.weights, eps, penalized) + _fy_gap(
        F2, s2, v, Y.weights, eps, penalized
    )


def thompson_distance(r, s) -> float:
    """Thompson part metric ``max(log max r/s, log max s/r)``."""
    r = np.asarray(r, float)
    s = np.asarray(s, float)
    if r.shape != s.shape:
        raise ValueError("shape mismatch")
    if np.any(r <= 0) or np.any(s <= 0):
        raise ValueError("Thompson metric needs strictly positive vectors")
    lr = np.log(r) - np.log(s)
    return float(max(lr.max(), -lr.min()))


# --------------------------------------------------------------------------
# plain iterations


def _log_or_ninf(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _weighted_log_change(new, old, w):
    ln, lo = _log_or_ninf(new), _log_or_ninf(old)
    both_zero = (new == 0) & (old == 0)
    with np.errstate(invalid="ignore"):
        d = np.where(both_zero, 0.0, np.abs(ln - lo))
    return float(np.sum(w * d))


def solve_plain(F1, F2, K: Kernel, X: DiscreteSpace, Y: DiscreteSpace,
                eps: Optional[float] = None, options: Optional[ScalingOptions] = None,
                callback: Optional[Callable] = None, compute_values=True) -> SolveReport:
    """Scaling algorithm on a fixed kernel.

    ``callback(iteration, a, b)`` is called after every full sweep.
    """
    opts = options or ScalingOptions()
    eps = K.eps if eps is None else eps
    if eps < PLAIN_EPS_FLOOR:
        raise ValueError(
            f"eps={eps:g} is below {PLAIN_EPS_FLOOR:g}; use solve_stabilized instead"
        )
    dx, dy = X.weights, Y.weights
    if K.shape != (len(X), len(Y)):
        raise ValueError("kernel shape does not match the spaces")
    zero_u = np.zeros(len(X))
    zero_v = np.zeros(len(Y))

    b = np.ones(len(Y))
    a = np.ones(len(X))
    gaps = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        a_old, b_old = a, b
        s1 = K.apply(b * dy)
        a = F1.proxdiv(s1, zero_u, eps)
        s2 = K.apply_t(a * dx)
        b = F2.proxdiv(s2, zero_v, eps)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise SolverError("non-finite scaling; try solve_stabilized", it)
        if callback is not None:
            callback(it, a, b)
        if opts.gap_every and it % opts.gap_every == 0:
            g = _plain_gap(F1, F2, K, X, Y, a, b, eps)
            gaps.append(g)
            if opts.gap_tol is not None and g < opts.gap_tol and it >= opts.min_iter:
                converged = True
                break
        change = _weighted_log_change(a, a_old, dx) + _weighted_log_change(b, b_old, dy)
        if it >= opts.min_iter and change < opts.tol:
            converged = True
            break
        if max(np.max(np.abs(_finite_logs(a))), np.max(np.abs(_finite_logs(b)))) > DIVERGED_LOG:
            raise SolverError("scalings diverge (problem may be infeasible)", it)

    plan = Plan.from_scalings(a, K, b, X, Y)
    u = eps * _log_or_ninf(a)
    v = eps * _log_or_ninf(b)
    primal = dual = math.nan
    if compute_values:
        s1 = a * K.apply(b * dy)
        s2 = b * K.apply_t(a * dx)
        mass_k = float(dx @ K.apply(dy))
        primal, dual = _factored_values(F1, F2, X, Y, eps, s1, s2, u, v, mass_k)
    return SolveReport(plan, primal, dual, gaps, it, converged, u, v, eps)


def _finite_logs(x):
    lx = _log_or_ninf(x[x > 0])
    return lx if lx.size else np.zeros(1)


def _finite_part(u):
    # zero scalings carry -inf potentials; they multiply zero mass
    return np.where(np.isfinite(u), u, -1e300)


def _plain_gap(F1, F2, K, X, Y, a, b, eps):
    s1 = a * K.apply(b * Y.weights)
    s2 = b * K.apply_t(a * X.weights)
    u = eps * _log_or_ninf(a)
    v = eps * _log_or_ninf(b)
    return pd_gap(s1, s2, u, v, F1, F2, X, Y, eps)


# --------------------------------------------------------------------------
# stabilized iterations, n couplings


@dataclass
class EngineState:
    a_tilde: np.ndarray  # (n, I)
    b_tilde: np.ndarray  # (n, J)
    u: np.ndarray  # (n, I)
    v: np.ndarray  # (n, J)
    eps: float
    iteration: int
    kernel: np.ndarray  # (n, I, J) stabilized kernels
    eps_factors: np.ndarray  # per-coupling multipliers of eps

    @property
    def eps_k(self) -> np.ndarray:
        return self.eps * self.eps_factors

    def plans(self) -> np.ndarray:
        return self.a_tilde[:, :, None] * self.kernel * self.b_tilde[:, None, :]

    def log_a(self) -> np.ndarray:
        return _log_or_ninf(self.a_tilde) + self.u / self.eps_k[:, None]

    def log_b(self) -> np.ndarray:
        return _log_or_ninf(self.b_tilde) + self.v / self.eps_k[:, None]


@dataclass
class EngineResult:
    state: EngineState
    iterations: int
    converged: bool
    gap_history: list
    absorptions: int


def _absorb_one(tilde, pot, eps_k):
    pos = tilde > 0
    with np.errstate(divide="ignore"):
        shift = np.where(pos, eps_k[:, None] * np.log(np.where(pos, tilde, 1.0)), 0.0)
    return np.where(pos, 1.0, 0.0), pot + shift


def _nan_to_inf(x):
    return np.where(np.isnan(x), np.inf, x)


def _cap_dead(u, v, dead_u, dead_v, costs):
    """Bound the potentials of zero scalings by c-transforms.

    A zero scaling makes its potential irrelevant for the plan, but a stale
    value can still overflow the stabilized kernel once eps shrinks.  After
    capping, every kernel entry touching a dead index is at most 1.
    """
    if not (dead_u.any() or dead_v.any()):
        return u, v
    u, v = u.copy(), v.copy()
    with np.errstate(invalid="ignore"):
        if dead_u.any():
            cap = _nan_to_inf(costs - v[:, None, :]).min(axis=2)
            new = np.where(np.isfinite(u), np.minimum(u, cap), cap)
            u = np.where(dead_u, np.where(np.isfinite(new), new, 0.0), u)
        if dead_v.any():
            cap = _nan_to_inf(costs - u[:, :, None]).min(axis=1)
            new = np.where(np.isfinite(v), np.minimum(v, cap), cap)
            v = np.where(dead_v, np.where(np.isfinite(new), new, 0.0), v)
    return u, v


def run_engine(costs: np.ndarray, dx, dy, prox1: Callable, prox2: Callable,
               eps: float, options: Optional[ScalingOptions] = None,
               eps_factors=None, monitor: Optional[Callable] = None,
               init=None, callback: Optional[Callable] = None) -> EngineResult:
    """Stabilized scaling loop for ``n`` couplings.

    ``prox1(S, U, eps)`` receives ``S`` of shape ``(n, I)`` and potentials
    ``U = u / eps_factors`` so that ``exp(-U/eps)`` is the per-coupling
    stabilization factor; ``prox2`` likewise on ``Y``.
    ``monitor(state)`` returns a primal-dual gap (or None) and is called
    every ``options.gap_every`` iterations once the eps schedule is done.
    """
    opts = options or ScalingOptions()
    costs = np.asarray(costs, dtype=float)
    if costs.ndim == 2:
        costs = costs[None]
    n, I, J = costs.shape
    dx = np.asarray(dx, float)
    dy = np.asarray(dy, float)
    factors = np.ones(n) if eps_factors is None else np.asarray(eps_factors, float)
    eps0 = opts.eps0 if opts.eps0 is not None else eps
    schedule = epsilon_schedule(max(eps0, eps), eps, opts.divisions, opts.every)

    if init is not None:
        u, v = (np.array(x, dtype=float) for x in init)
        u, v = _cap_dead(u, v, ~np.isfinite(u), ~np.isfinite(v), costs)
    else:
        u, v = np.zeros((n, I)), np.zeros((n, J))
    cur_eps = schedule.eps_at(0)

    def build(u, v, e):
        ek = e * factors
        return np.stack([_stabilized_matrix(costs[k], u[k], v[k], ek[k]) for k in range(n)])

    state = EngineState(np.ones((n, I)), np.ones((n, J)), u, v, cur_eps, 0,
                        build(u, v, cur_eps), factors)
    gaps = []
    absorptions = 0
    converged = False
    prev = None
    it = 0

    def absorb(rebuild=True):
        nonlocal absorptions, prev
        ek = state.eps_k
        state.a_tilde, state.u = _absorb_one(state.a_tilde, state.u, ek)
        state.b_tilde, state.v = _absorb_one(state.b_tilde, state.v, ek)
        state.u, state.v = _cap_dead(state.u, state.v, state.a_tilde == 0,
                                     state.b_tilde == 0, costs)
        if rebuild:
            state.kernel = build(state.u, state.v, state.eps)
        absorptions += 1
        if prev is not None:
            prev = (state.a_tilde.copy(), state.b_tilde.copy())

    for it in range(1, opts.max_iter + 1):
        state.iteration = it
        Kt = state.kernel
        s1 = np.einsum("kij,kj->ki", Kt, state.b_tilde * dy)
        state.a_tilde = prox1(s1, state.u / factors[:, None], state.eps)
        s2 = np.einsum("kij,ki->kj", Kt, state.a_tilde * dx)
        state.b_tilde = prox2(s2, state.v / factors[:, None], state.eps)
        if not (np.all(np.isfinite(state.a_tilde)) and np.all(np.isfinite(state.b_tilde))):
            raise SolverError("overflow despite absorption", it)
        if callback is not None:
            callback(state)

        if it in schedule.change_points:
            absorb(rebuild=False)
            state.eps = schedule.eps_at(it)
            state.kernel = build(state.u, state.v, state.eps)
            prev = None
            continue

        if it > schedule.end:
            if monitor is not None and opts.gap_every and it % opts.gap_every == 0:
                g = monitor(state)
                if g is not None:
                    gaps.append(g)
                    if opts.gap_tol is not None and g < opts.gap_tol and it >= opts.min_iter:
                        converged = True
                        break
            if prev is not None:
                change = sum(
                    _weighted_log_change(state.a_tilde[k], prev[0][k], dx)
                    + _weighted_log_change(state.b_tilde[k], prev[1][k], dy)
                    for k in range(n)
                )
                if it >= opts.min_iter and change < opts.tol:
                    converged = True
                    break
            prev = (state.a_tilde.copy(), state.b_tilde.copy())

        if it % opts.absorb_check_every == 0:
            big = max(np.max(np.abs(_finite_logs(state.a_tilde))),
                      np.max(np.abs(_finite_logs(state.b_tilde))))
            if big > opts.absorb_threshold:
                absorb()

    return EngineResult(state, it, converged, gaps, absorptions)


def _stabilized_gap(F1, F2, X, Y, st: EngineState):
    R = st.plans()[0]
    s1 = R @ Y.weights
    s2 = R.T @ X.weights
    u = st.eps * st.log_a()[0]
    v = st.eps * st.log_b()[0]
    return pd_gap(s1, s2, u, v, F1, F2, X, Y, st.eps)


def solve_stabilized(F1, F2, C: CostMatrix, X: DiscreteSpace, Y: DiscreteSpace,
                     eps: float, options: Optional[ScalingOptions] = None,
                     callback: Optional[Callable] = None, init=None) -> SolveReport:
    """Log-stabilized scaling algorithm with absorption and eps-scaling.

    ``init=(u, v)`` warm-starts the potentials.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if C.shape != (len(X), len(Y)):
        raise ValueError("cost shape does not match the spaces")
    opts = options or ScalingOptions()

    def prox1(S, U, e):
        return F1.proxdiv(S[0], U[0], e)[None]

    def prox2(S, V, e):
        return F2.proxdiv(S[0], V[0], e)[None]

    monitor = (lambda st: _stabilized_gap(F1, F2, X, Y, st)) if opts.gap_every else None
    if init is not None:
        init = (np.asarray(init[0], float)[None], np.asarray(init[1], float)[None])
    res = run_engine(C.entries, X.weights, Y.weights, prox1, prox2, eps, opts,
                     monitor=monitor, init=init, callback=callback)
    st = res.state
    R = st.plans()[0]
    plan = Plan(X, Y, density=R)
    u = st.eps * st.log_a()[0]
    v = st.eps * st.log_b()[0]
    s1, s2 = R @ Y.weights, R.T @ X.weights
    mass_k = float(X.weights @ np.exp(-C.entries / st.eps) @ Y.weights)
    primal, dual = _factored_values(F1, F2, X, Y, st.eps, s1, s2, u, v, mass_k)
    return SolveReport(plan, primal, dual, res.gap_history, res.iterations,
                       res.converged, u, v, st.eps)


def _factored_values(F1, F2, X, Y, e, s1, s2, u, v, mass_k):
    """Penalized primal and dual values at ``R = exp(u/e) K exp(v/e)``.

    Uses ``KLbar(R|K) = R (u + v)/e - R + K`` so that only the marginals
    ``s1 = R dy``, ``s2 = R^T dx`` and the kernel mass are needed.
    """
    dx, dy = X.weights, Y.weights
    f1 = F1.value(s1, dx, penalty_eps=e)
    f2 = F2.value(s2, dy, penalty_eps=e)
    with np.errstate(invalid="ignore"):
        lin = float(np.sum(dx * np.where(s1 > 0, u * s1, 0.0))) + float(
            np.sum(dy * np.where(s2 > 0, v * s2, 0.0))
        )
    mass_r = float(dx @ s1)
    primal = f1 + f2 + lin - e * mass_r + e * mass_k
    c1 = F1.conjugate_value(-_finite_part(u), dx, penalty_eps=e)
    c2 = F2.conjugate_value(-_finite_part(v), dy, penalty_eps=e)
    dual = -c1 - c2 - e * (mass_r - mass_k)
    return primal, dual
