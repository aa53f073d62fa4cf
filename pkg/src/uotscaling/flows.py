"""Time-discrete gradient flows: one entropic transport solve per step.

``F1`` pins the previous iterate (KL to it for WF flows, equality for
Wasserstein flows) and ``F2`` carries ``2 tau G``.  The growth models share
one closed form: tumor growth is the single-species case of the
two-species model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .divergences import EXP_CLAMP, DivergenceSpec
from .geometry import CostMatrix, DiscreteSpace
from .scaling import ScalingOptions, SolverError, run_engine

ENTROPY_FIT = "entropy_fit"
CONGESTION = "congestion"
TUMOR = "tumor"
TWO_SPECIES = "two_species"
KINDS = (ENTROPY_FIT, CONGESTION, TUMOR, TWO_SPECIES)


@dataclass(frozen=True)
class FlowEnergy:
    kind: str
    tau: float
    alpha: float = 0.0
    reference: Optional[np.ndarray] = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown energy {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind in (TUMOR, TWO_SPECIES):
            if np.ndim(self.alpha) != 0:
                raise ValueError("a single growth incentive alpha is shared by all species")
            if not self.alpha > 0:
                raise ValueError("alpha must be positive")
            if not 2 * self.tau * self.alpha < 1:
                raise ValueError("need 2 tau alpha < 1")
        if self.kind == ENTROPY_FIT:
            if self.reference is None:
                raise ValueError("entropy fit needs a reference density")
            if not self.weight > 0:
                raise ValueError("weight must be positive")
            object.__setattr__(self, "reference", np.asarray(self.reference, dtype=float))

    @classmethod
    def entropy_fit(cls, reference, tau, weight=1.0):
        return cls(ENTROPY_FIT, tau, reference=reference, weight=weight)

    @classmethod
    def congestion(cls, tau):
        return cls(CONGESTION, tau)

    @classmethod
    def tumor(cls, alpha, tau):
        return cls(TUMOR, tau, alpha=alpha)

    @classmethod
    def two_species(cls, alpha, tau):
        return cls(TWO_SPECIES, tau, alpha=alpha)

    @property
    def growth(self) -> bool:
        return self.kind in (TUMOR, TWO_SPECIES)

    @property
    def contraction(self) -> float:
        """``1 - 2 tau alpha``."""
        return 1.0 - 2.0 * self.tau * self.alpha

    @property
    def species(self) -> int:
        return 2 if self.kind == TWO_SPECIES else 1


@dataclass
class StepReport:
    step: int
    iterations: int
    converged: bool
    mass: float


@dataclass
class FlowTrajectory:
    densities: list
    reports: list = field(default_factory=list)
    tau: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(len(self.densities))

    def masses(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return np.array([float(np.sum(np.atleast_2d(d) @ w)) for d in self.densities])


def _exp(expo):
    return np.exp(np.clip(expo, -EXP_CLAMP, EXP_CLAMP))


def _growth_factors(S, U, eps, c):
    # e^{-u/eps} / beta(sigma) with beta = max{(sum sigma)^{1/(1+eps)}, c^{1/eps}}
    with np.errstate(divide="ignore", invalid="ignore"):
        log_sig = np.where(S > 0, np.log(S) - U / eps, -np.inf)
    mx = log_sig.max(axis=0)
    live = np.isfinite(mx)
    lse = np.full(mx.shape, -np.inf)
    lse[live] = mx[live] + np.log(np.sum(np.exp(log_sig[:, live] - mx[live]), axis=0))
    log_beta = np.maximum(lse / (1.0 + eps), math.log(c) / eps)
    out = _exp(-U / eps - log_beta)
    out[S == 0] = 0.0
    return out


def flow_proxdiv(energy: FlowEnergy, s, u, eps):
    """Scaling factors of ``F2 = 2 tau G`` (stabilized form).

    For two species ``s`` and ``u`` have shape ``(2, J)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    s = np.asarray(s, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), s.shape)
    if np.any(s < 0):
        raise ValueError("s must be nonnegative")
    kind = energy.kind
    if kind == ENTROPY_FIT:
        spec = DivergenceSpec.kl(energy.reference, 2.0 * energy.tau * energy.weight)
        return spec.proxdiv(s, u, eps)
    if kind == CONGESTION:
        with np.errstate(divide="ignore"):
            expo = np.minimum(-np.log(s), -u / eps)
        out = _exp(expo)
        out[s == 0] = 0.0
        return out
    if kind == TUMOR:
        if s.ndim != 1:
            raise ValueError("tumor growth takes a single density")
        return _growth_factors(s[None], u[None], eps, energy.contraction)[0]
    if s.ndim != 2 or s.shape[0] != 2:
        raise ValueError("two species take arrays of shape (2, J)")
    return _growth_factors(s, u, eps, energy.contraction)


def flow_recover_next(energy: FlowEnergy, marginal) -> np.ndarray:
    """Next density from the converged second marginal(s)."""
    m = np.asarray(marginal, dtype=float)
    if energy.kind == CONGESTION:
        return np.minimum(m, 1.0)
    if energy.kind == ENTROPY_FIT:
        return m.copy()
    c = energy.contraction
    total = m if energy.kind == TUMOR else m.sum(axis=0)
    return m / np.maximum(c, total)


def run_flow(initial, energy: FlowEnergy, X: DiscreteSpace, cost: CostMatrix,
             steps: int, eps: float, options: Optional[ScalingOptions] = None,
             warm_start: bool = True) -> FlowTrajectory:
    """JKO stepping.

    Growth energies pin the previous iterate with KL(lam=1), the others with
    an equality constraint.  With ``warm_start`` every step after the first
    starts from the previous potentials at the target ``eps``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    mu = np.asarray(initial, dtype=float)
    n = energy.species
    if n == 2 and (mu.ndim != 2 or mu.shape[0] != 2):
        raise ValueError("two species need an initial array of shape (2, I)")
    if n == 1 and mu.ndim != 1:
        raise ValueError("initial density must be a vector")
    if np.any(mu < 0):
        raise ValueError("initial density must be nonnegative")
    if cost.shape != (len(X), len(X)):
        raise ValueError("cost must be square on X")
    opts = options or ScalingOptions()
    w = X.weights
    costs = np.broadcast_to(cost.entries, (n,) + cost.shape)
    traj = FlowTrajectory([mu.copy()], tau=energy.tau)
    init = None

    for step in range(1, steps + 1):
        ref = np.atleast_2d(mu)
        if energy.growth:
            firsts = [DivergenceSpec.kl(ref[k]) for k in range(n)]
        else:
            firsts = [DivergenceSpec.equality(ref[k]) for k in range(n)]

        def prox1(S, U, e, firsts=firsts):
            return np.stack([firsts[k].proxdiv(S[k], U[k], e) for k in range(n)])

        def prox2(S, U, e):
            if n == 1:
                return flow_proxdiv(energy, S[0], U[0], e)[None]
            return flow_proxdiv(energy, S, U, e)

        step_opts = opts
        if warm_start and init is not None:
            step_opts = ScalingOptions(**{**opts.__dict__, "eps0": None})
        try:
            res = run_engine(costs, w, w, prox1, prox2, eps, step_opts, init=init)
        except SolverError as exc:
            raise SolverError(f"flow step {step}: {exc}") from exc
        st = res.state
        second = np.einsum("kij,i->kj", st.plans(), w)
        nxt = flow_recover_next(energy, second[0] if n == 1 else second)
        if warm_start:
            # zero scalings become -inf and are re-capped by the engine
            init = (st.eps * st.log_a(), st.eps * st.log_b())
        mu = nxt
        traj.densities.append(mu.copy())
        traj.reports.append(StepReport(step, res.iterations, res.converged,
                                       float(np.sum(np.atleast_2d(mu) @ w))))
    return traj
