"""Discrete spaces, transport costs and Gibbs kernels.

Kernels come in two flavours. ``Kernel.dense`` stores the full ``I x J``
matrix. ``Kernel.separable`` stores one 1-D kernel per grid axis and applies
the full kernel by contracting the axes one after the other, which is what
makes quadratic-cost problems on large Cartesian grids tractable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class DiscreteSpace:
    """Finite point cloud with nonnegative reference weights.

    ``axes`` is set when the space is an axis-aligned uniform grid built with
    :meth:`grid`; points are then stored in C order (last axis fastest).
    """

    points: np.ndarray
    weights: np.ndarray
    axes: Optional[tuple] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if points.ndim != 2:
            raise ValueError("points must be a 1-D or 2-D array")
        if points.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{points.shape[0]} points but {weights.shape[0]} weights"
            )
        if points.shape[0] < 1:
            raise ValueError("a space needs at least one point")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple:
        if self.axes is None:
            return (len(self),)
        return tuple(len(ax) for ax in self.axes)

    @classmethod
    def grid(cls, axes: Sequence[np.ndarray], weights=None) -> "DiscreteSpace":
        """Cartesian grid from per-axis coordinates.

        Default weights give unit mass to every point.
        """
        axes = tuple(np.asarray(ax, dtype=float).reshape(-1) for ax in axes)
        for ax in axes:
            if len(ax) > 2 and not np.allclose(np.diff(ax), ax[1] - ax[0]):
                raise ValueError("grid axes must be uniformly spaced")
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.reshape(-1) for m in mesh], axis=1)
        if weights is None:
            weights = np.ones(points.shape[0])
        return cls(points, weights, axes)

    @classmethod
    def interval(cls, n: int, lo: float = 0.0, hi: float = 1.0) -> "DiscreteSpace":
        """Uniform samples of ``[lo, hi]`` with the discretized Lebesgue
        measure (weights ``1/n``)."""
        x = np.linspace(lo, hi, n)
        return cls.grid([x], np.full(n, 1.0 / n))


@dataclass(frozen=True)
class CostMatrix:
    """Transport cost between two spaces.

    Separable costs keep their per-axis factors in ``axis_costs`` and only
    materialize ``entries`` on demand.
    """

    _entries: Optional[np.ndarray] = field(default=None, repr=False)
    axis_costs: Optional[tuple] = None
    shape: tuple = ()

    @property
    def separable(self) -> bool:
        return self.axis_costs is not None

    @property
    def entries(self) -> np.ndarray:
        if self._entries is not None:
            return self._entries
        # sum of per-axis costs, broadcast over the grid and flattened
        ndim = len(self.axis_costs)
        total = 0.0
        for k, c in enumerate(self.axis_costs):
            shape = [1] * (2 * ndim)
            shape[k] = c.shape[0]
            shape[ndim + k] = c.shape[1]
            total = total + c.reshape(shape)
        full = np.broadcast_to(
            total,
            tuple(c.shape[0] for c in self.axis_costs)
            + tuple(c.shape[1] for c in self.axis_costs),
        )
        out = np.ascontiguousarray(full).reshape(self.shape)
        object.__setattr__(self, "_entries", out)
        return out

    @classmethod
    def from_array(cls, entries) -> "CostMatrix":
        entries = np.asarray(entries, dtype=float)
        if entries.ndim != 2:
            raise ValueError("cost must be a matrix")
        if np.any(np.isnan(entries)) or np.any(entries < 0):
            raise ValueError("costs must be nonnegative (or +inf)")
        return cls(entries, None, entries.shape)


def _check_dims(X: DiscreteSpace, Y: DiscreteSpace):
    if X.dim != Y.dim:
        raise ValueError(f"dimension mismatch: {X.dim} vs {Y.dim}")


def _distances(X: DiscreteSpace, Y: DiscreteSpace) -> np.ndarray:
    diff = X.points[:, None, :] - Y.points[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def build_cost_quadratic(X: DiscreteSpace, Y: DiscreteSpace) -> CostMatrix:
    """Squared Euclidean cost ``|x - y|^2``.

    Separable storage is used when both spaces are grids with the same
    number of axes.
    """
    _check_dims(X, Y)
    if X.axes is not None and Y.axes is not None and len(X.axes) == len(Y.axes):
        factors = tuple(
            (ax[:, None] - ay[None, :]) ** 2 for ax, ay in zip(X.axes, Y.axes)
        )
        return CostMatrix(None, factors, (len(X), len(Y)))
    diff = X.points[:, None, :] - Y.points[None, :, :]
    return CostMatrix.from_array(np.sum(diff**2, axis=-1))


def build_cost_wf(X: DiscreteSpace, Y: DiscreteSpace, cutoff: float) -> CostMatrix:
    """Wasserstein-Fisher-Rao cost ``-log cos^2(pi/2 * d / cutoff)``,
    infinite for ``d >= cutoff``."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    _check_dims(X, Y)
    d = _distances(X, Y)
    z = np.minimum(d / cutoff, 1.0) * (np.pi / 2)
    with np.errstate(divide="ignore"):
        c = -2.0 * np.log(np.cos(z))
    c[d >= cutoff] = np.inf
    # cos(0) == 1 exactly, but keep tiny negative roundoff out
    c = np.maximum(c, 0.0)
    return CostMatrix.from_array(c)


@dataclass(frozen=True)
class Kernel:
    """Gibbs kernel, dense or as per-axis factors of a separable grid kernel."""

    eps: float
    matrix: Optional[np.ndarray] = None
    factors: Optional[tuple] = None
    shape: tuple = ()

    @property
    def separable(self) -> bool:
        return self.factors is not None

    @classmethod
    def dense_from(cls, matrix, eps: float) -> "Kernel":
        matrix = np.asarray(matrix, dtype=float)
        if np.any(matrix < 0):
            raise ValueError("kernel entries must be nonnegative")
        return cls(eps, matrix, None, matrix.shape)

    def todense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        out = self.factors[0]
        for f in self.factors[1:]:
            out = np.kron(out, f)
        return out

    def _in_shape(self, transpose):
        idx = 0 if transpose else 1
        return tuple(f.shape[idx] for f in self.factors)

    def _contract(self, x: np.ndarray, transpose: bool) -> np.ndarray:
        t = x.reshape(self._in_shape(transpose))
        for k, f in enumerate(self.factors):
            m = f if transpose else f.T
            # contract axis k with the 1-D kernel, keep axis order
            t = np.moveaxis(np.tensordot(t, m, axes=([k], [0])), -1, k)
        return t.reshape(-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Plain product ``K @ x``."""
        if self.matrix is not None:
            return self.matrix @ x
        return self._contract(x, transpose=False)

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        """Plain product ``K.T @ x``."""
        if self.matrix is not None:
            return self.matrix.T @ x
        return self._contract(x, transpose=True)


def gibbs_kernel(C: CostMatrix, eps: float) -> Kernel:
    if not eps > 0:
        raise ValueError("eps must be positive")
    if C.separable:
        factors = tuple(np.exp(-c / eps) for c in C.axis_costs)
        return Kernel(eps, None, factors, C.shape)
    return Kernel(eps, np.exp(-C.entries / eps), None, C.shape)


def _check_len(vec, n, what):
    if vec.shape[0] != n:
        raise ValueError(f"{what} has length {vec.shape[0]}, expected {n}")


def kernel_apply(K: Kernel, b, w) -> np.ndarray:
    """``K (b * w)``: the kernel integrated against ``b`` in the second
    space's reference measure."""
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    _check_len(b, K.shape[1], "b")
    _check_len(w, K.shape[1], "weights")
    return K.apply(b * w)


def kernel_apply_transpose(K: Kernel, a, w) -> np.ndarray:
    """``K^T (a * w)``."""
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    _check_len(a, K.shape[0], "a")
    _check_len(w, K.shape[0], "weights")
    return K.apply_t(a * w)


def stabilized_kernel(C: CostMatrix, u, v, eps: float) -> Kernel:
    """Dense kernel ``exp((u_i + v_j - C_ij) / eps)`` with absorbed potentials."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    I, J = C.shape
    _check_len(u, I, "u")
    _check_len(v, J, "v")
    return Kernel(eps, _stabilized_matrix(C.entries, u, v, eps), None, (I, J))


def _stabilized_matrix(c: np.ndarray, u, v, eps) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        expo = (u[:, None] + v[None, :] - c) / eps
    # inf cost dominates any finite (or -inf) potential
    expo[np.isinf(c)] = -np.inf
    expo[np.isnan(expo)] = -np.inf
    with np.errstate(over="ignore"):
        return np.exp(expo)
