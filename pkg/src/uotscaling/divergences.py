"""Marginal divergences: values, convex conjugates and proxdiv operators.

Every divergence is an integral functional ``D(a|p) = sum_x w_x D(a_x|p_x)``
built from an entropy function ``phi``.  The scaling solvers only ever
need the pointwise operator

    proxdiv(s, u, eps) = prox^KL_{F/eps}(s * exp(-u/eps)) / s      (0/0 = 0)

which has a closed form for each kind below.  The closed forms are all
evaluated in the log domain so that ``exp(-u/eps)`` is never formed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# saturation bounds for exponents of proxdiv outputs
EXP_CLAMP = 700.0


class Kind(str, enum.Enum):
    EQUALITY = "equality"
    KL = "kl"
    TV = "tv"
    RANGE = "range"


@dataclass(frozen=True)
class DivergenceSpec:
    """One marginal functional ``F(s) = D_phi(s|reference)``.

    ``lam`` weights the KL and TV kinds; ``alpha <= beta`` bound the ratio
    for the range kind (``beta`` may be ``inf``).
    """

    kind: Kind
    reference: np.ndarray
    lam: float = 1.0
    alpha: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        kind = Kind(self.kind)
        ref = np.atleast_1d(np.asarray(self.reference, dtype=float))
        if np.any(ref < 0) or not np.all(np.isfinite(ref)):
            raise ValueError("reference density must be finite and nonnegative")
        if kind in (Kind.KL, Kind.TV) and not self.lam > 0:
            raise ValueError(f"{kind.value} needs lam > 0")
        if kind is Kind.RANGE and not (0 <= self.alpha <= self.beta):
            raise ValueError("range needs 0 <= alpha <= beta")
        if kind is Kind.RANGE and math.isinf(self.alpha):
            raise ValueError("alpha must be finite")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "reference", ref)

    # convenience constructors
    @classmethod
    def equality(cls, p):
        return cls(Kind.EQUALITY, p)

    @classmethod
    def kl(cls, p, lam=1.0):
        return cls(Kind.KL, p, lam=lam)

    @classmethod
    def tv(cls, p, lam=1.0):
        return cls(Kind.TV, p, lam=lam)

    @classmethod
    def range(cls, p, alpha, beta):
        return cls(Kind.RANGE, p, alpha=alpha, beta=beta)

    def with_reference(self, p) -> "DivergenceSpec":
        return DivergenceSpec(self.kind, p, self.lam, self.alpha, self.beta)

    @property
    def recession(self) -> float:
        """Slope at infinity of the (weighted) entropy function."""
        if self.kind is Kind.TV:
            return self.lam
        if self.kind is Kind.RANGE and math.isinf(self.beta):
            return 0.0
        return math.inf

    # solver-facing interface
    def proxdiv(self, s, u, eps):
        return proxdiv(self, s, u, eps)

    def value(self, a, w, penalty_eps=None):
        return divergence_value(self, a, w, penalty_eps=penalty_eps)

    def conjugate_value(self, u, w, penalty_eps=None):
        return divergence_conjugate_value(self, u, w, penalty_eps=penalty_eps)


def _check(spec, *arrays):
    n = spec.reference.shape[0]
    for arr in arrays:
        if arr.shape[0] != n:
            raise ValueError(f"length {arr.shape[0]} does not match reference length {n}")


def _feasible_interval(spec):
    p = spec.reference
    if spec.kind is Kind.RANGE:
        lo = spec.alpha * p
        with np.errstate(invalid="ignore"):
            hi = np.where(p > 0, spec.beta * p, 0.0 if np.isfinite(spec.beta) else np.inf)
        return lo, hi
    return p, p


def divergence_value(spec: DivergenceSpec, a, w, penalty_eps=None) -> float:
    """``sum_x w_x Dbar(a_x|p_x)``.

    For the set-constraint kinds (equality, range) an infeasible ``a`` gives
    ``inf``, unless ``penalty_eps`` is set: the indicator is then replaced by
    ``exp(d/penalty_eps) - 1`` with ``d`` the sup-norm distance to the set.
    """
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    _check(spec, a, w)
    if np.any(a < 0):
        raise ValueError("divergence argument must be nonnegative")
    p = spec.reference
    kind = spec.kind

    if kind in (Kind.EQUALITY, Kind.RANGE):
        lo, hi = _feasible_interval(spec)
        dist = np.maximum(np.maximum(lo - a, a - hi), 0.0)
        dist = dist[w > 0]
        if not np.any(dist > 0):
            return 0.0
        if penalty_eps is None:
            return math.inf
        with np.errstate(over="ignore"):
            return float(np.expm1(dist.max() / penalty_eps))

    pos = p > 0
    terms = np.zeros_like(a)
    r = np.where(pos, a / np.where(pos, p, 1.0), 0.0)
    if kind is Kind.KL:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(r > 0, r * np.log(r) - r + 1.0, 1.0)
        terms[pos] = spec.lam * p[pos] * ent[pos]
        sing = ~pos & (a > 0)
        if np.any(sing & (w > 0)):
            return math.inf
    else:  # TV
        terms[pos] = spec.lam * p[pos] * np.abs(r[pos] - 1.0)
        terms[~pos] = spec.lam * a[~pos]
    return float(np.sum(w * terms))


def _phi_conjugate(spec, x):
    kind = spec.kind
    if kind is Kind.EQUALITY:
        return x
    if kind is Kind.KL:
        with np.errstate(over="ignore"):
            return spec.lam * np.expm1(x / spec.lam)
    if kind is Kind.TV:
        return np.maximum(x, -spec.lam)
    if math.isinf(spec.beta):
        return np.where(x <= 0, spec.alpha * x, np.inf)
    return np.maximum(spec.alpha * x, spec.beta * x)


def divergence_conjugate_value(spec: DivergenceSpec, u, w, penalty_eps=None) -> float:
    """``sum_x w_x p_x phi*(u_x)``, infinite if some ``u_x`` exceeds the
    recession slope.  With ``penalty_eps`` the domain violation is charged
    ``exp(d/penalty_eps) - 1`` instead (sup-norm distance ``d``)."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    _check(spec, u, w)
    p = spec.reference
    rec = spec.recession
    excess = np.maximum(u - rec, 0.0)[w > 0] if np.isfinite(rec) else np.zeros(1)
    penalty = 0.0
    if np.any(excess > 0):
        if penalty_eps is None:
            return math.inf
        with np.errstate(over="ignore"):
            penalty = float(np.expm1(excess.max() / penalty_eps))
        u = np.minimum(u, rec)
    vals = _phi_conjugate(spec, u)
    # points with zero reference contribute nothing once the domain holds
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * vals, 0.0)
    return float(np.sum(w * terms)) + penalty


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def proxdiv(spec: DivergenceSpec, s, u, eps) -> np.ndarray:
    """Stabilized proxdiv operator of ``spec`` (Sinkhorn-type scaling factor).

    Outputs are saturated to ``exp(+-EXP_CLAMP)``; entries with ``s == 0``
    are exactly zero.
    """
    s = np.asarray(s, dtype=float)
    _check(spec, s)
    return proxdiv_log_reference(spec, _log(spec.reference), s, u, eps)


def proxdiv_log_reference(spec: DivergenceSpec, log_p, s, u, eps) -> np.ndarray:
    """:func:`proxdiv` with the reference given by its logarithm.

    ``spec.reference`` is ignored; ``log_p`` may hold values whose
    exponential overflows.
    """
    s = np.asarray(s, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), s.shape)
    log_p = np.broadcast_to(np.asarray(log_p, dtype=float), s.shape)
    if not eps > 0:
        raise ValueError("eps must be positive")
    if np.any(s < 0):
        raise ValueError("proxdiv needs s >= 0")
    kind = spec.kind
    with np.errstate(invalid="ignore"):
        log_ratio = log_p - _log(s)  # log(p/s); -inf where p == 0
        if kind is Kind.EQUALITY:
            expo = log_ratio
        elif kind is Kind.KL:
            lam = spec.lam
            expo = (lam * log_ratio - u) / (lam + eps)
        elif kind is Kind.TV:
            lam = spec.lam
            expo = np.minimum((lam - u) / eps, np.maximum(-(lam + u) / eps, log_ratio))
        else:
            free = -u / eps
            lo = math.log(spec.alpha) + log_ratio if spec.alpha > 0 else np.full_like(s, -np.inf)
            if math.isinf(spec.beta):
                hi = np.full_like(s, np.inf)
            elif spec.beta > 0:
                hi = math.log(spec.beta) + log_ratio
            else:
                hi = np.full_like(s, -np.inf)
            expo = np.minimum(hi, np.maximum(lo, free))
    out = np.exp(np.clip(expo, -EXP_CLAMP, EXP_CLAMP))
    out[expo == -np.inf] = 0.0
    out[s == 0] = 0.0
    return out
