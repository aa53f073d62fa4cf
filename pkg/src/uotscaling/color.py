"""Color histograms in CIE-Lab and color transfer through a coupling.

Lab coordinates are rescaled linearly into the unit cube:
``L / 100``, ``(a + 128) / 255``, ``(b + 128) / 255``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DiscreteSpace
from .scaling import Plan

DEFAULT_RESOLUTION = (64, 32, 32)

# sRGB primaries, D65 white
_M = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_M_INV = np.linalg.inv(_M)
_WHITE = _M @ np.ones(3)
_DELTA = 6.0 / 29.0


def _to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _from_linear(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def srgb_to_lab(rgb) -> np.ndarray:
    """8-bit sRGB (any shape ending in 3) to CIE-Lab."""
    c = np.asarray(rgb, dtype=float) / 255.0
    xyz = _to_linear(c) @ _M.T / _WHITE
    fx, fy, fz = (_f(xyz[..., k]) for k in range(3))
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    """CIE-Lab to 8-bit sRGB, clamped to [0, 255] and rounded."""
    lab = np.asarray(lab, dtype=float)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _WHITE
    rgb = _from_linear(xyz @ _M_INV.T)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


_LO = np.array([0.0, -128.0, -128.0])
_SPAN = np.array([100.0, 255.0, 255.0])


def lab_to_unit(lab):
    return (np.asarray(lab, dtype=float) - _LO) / _SPAN


def unit_to_lab(z):
    return np.asarray(z, dtype=float) * _SPAN + _LO


@dataclass
class LabHistogram:
    resolution: tuple
    masses: np.ndarray  # flat, C order over the resolution grid

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError("resolution must be three positive integers")
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.masses.shape[0] != int(np.prod(self.resolution)):
            raise ValueError("bin count does not match the resolution")
        if np.any(self.masses < 0):
            raise ValueError("masses must be nonnegative")

    @property
    def axes(self):
        return [(np.arange(r) + 0.5) / r for r in self.resolution]

    @property
    def centers(self) -> np.ndarray:
        """Bin centers in unit-cube coordinates, shape ``(bins, 3)``."""
        return self.space().points

    def space(self) -> DiscreteSpace:
        return DiscreteSpace.grid(self.axes)


def pixel_bins(image, resolution=DEFAULT_RESOLUTION) -> np.ndarray:
    """Flat bin index of every pixel, shape ``(h, w)``."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must have shape (h, w, 3)")
    z = lab_to_unit(srgb_to_lab(img))
    res = np.asarray(resolution)
    idx = np.clip(np.floor(z * res).astype(np.int64), 0, res - 1)
    return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), tuple(resolution))


def image_to_histogram(image, resolution=DEFAULT_RESOLUTION) -> LabHistogram:
    """Pixel counts per Lab bin."""
    bins = pixel_bins(image, resolution)
    counts = np.bincount(bins.ravel(), minlength=int(np.prod(resolution)))
    return LabHistogram(resolution, counts.astype(float))


def barycentric_map(plan: Plan, target_coords, source_coords=None) -> np.ndarray:
    """``T_i = sum_j R_ij y_j dy_j / sum_j R_ij dy_j``; rows without mass
    keep their source coordinates."""
    y = np.asarray(target_coords, dtype=float)
    src = plan.X.points if source_coords is None else np.asarray(source_coords, dtype=float)
    dy = plan.Y.weights
    den = plan.matvec(dy)
    num = np.stack([plan.matvec(dy * y[:, d]) for d in range(y.shape[1])], axis=1)
    out = src.astype(float).copy()
    live = den > 0
    out[live] = num[live] / den[live, None]
    return out


def apply_color_map(image, resolution, T, keep_detail: bool = False) -> np.ndarray:
    """Recolor every pixel with its bin's image under ``T`` (unit-cube Lab).

    With ``keep_detail`` the bin displacement ``T - center`` is added to the
    pixel's own color instead, which keeps sub-bin variations.
    """
    img = np.asarray(image)
    T = np.asarray(T, dtype=float)
    n = int(np.prod(resolution))
    if T.shape != (n, 3):
        raise ValueError(f"map must have shape ({n}, 3)")
    bins = pixel_bins(img, resolution)
    if keep_detail:
        centers = LabHistogram(resolution, np.zeros(n)).centers
        z = lab_to_unit(srgb_to_lab(img)) + (T - centers)[bins]
    else:
        z = T[bins]
    return lab_to_srgb(unit_to_lab(z))
