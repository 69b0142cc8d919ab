"""Sample distances and the diagnostics used by the error analysis.

Wasserstein-1 between empirical clouds (exact in 1D, sliced or by optimal
assignment in 2D), total variation on density grids, Gaussian smoothing of
grids, the normal upper tail ``Q`` and the contraction factor
``lambda(gamma) = 2 Q(B / (2 sqrt((t + (1+gamma) dt)^2 - t^2)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import erfc

from .dataset import PointCloud

__all__ = [
    "w1_1d",
    "sliced_w1",
    "exact_w1_small",
    "DensityGrid",
    "tv_grid",
    "convolve_grid",
    "gaussian_tail_q",
    "ContractionQuery",
    "contraction_lambda",
]

EXACT_W1_MAX_N = 2048


def _pts(a) -> np.ndarray:
    return a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)


def w1_1d(a, b) -> float:
    """Exact W1 between two equal-size 1D empirical measures."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("w1_1d needs non-empty samples")
    if a.size != b.size:
        raise ValueError(f"w1_1d needs equal sizes, got {a.size} and {b.size}")
    return float(np.mean(np.abs(a - b)))


def _equalize(a: np.ndarray, b: np.ndarray, seed: int):
    n = min(len(a), len(b))
    rng = np.random.default_rng([seed, 7])
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return a, b


def sliced_w1(a, b, n_proj: int = 128, seed: int = 0) -> float:
    """Mean 1D W1 over ``n_proj`` random directions (a lower bound on W1).

    Clouds of different sizes are subsampled to the smaller size first.
    Directions are fixed by ``seed``.
    """
    a, b = _equalize(_pts(a), _pts(b), seed)
    if len(a) == 0:
        raise ValueError("sliced_w1 needs non-empty clouds")
    angles = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, n_proj)
    dirs = np.stack([np.cos(angles), np.sin(angles)])
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    return float(np.mean(np.abs(pa - pb)))


def exact_w1_small(a, b, max_n: int = EXACT_W1_MAX_N) -> float:
    """Exact W1 for equal-size clouds via the optimal assignment."""
    a, b = _pts(a), _pts(b)
    if len(a) != len(b):
        raise ValueError(f"exact_w1_small needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ValueError("exact_w1_small needs non-empty clouds")
    if len(a) > max_n:
        raise ValueError(f"exact_w1_small is limited to n <= {max_n}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


# --------------------------------------------------------------------------
# Density grids


@dataclass(frozen=True)
class DensityGrid:
    """Cell masses on a regular grid; ``masses[i, j]`` is cell (y_i, x_j)."""

    origin: tuple[float, float]
    cell: float
    masses: np.ndarray

    def __post_init__(self):
        m = np.array(self.masses, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("masses must be 2D")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValueError("masses must be finite and non-negative")
        if abs(m.sum() - 1.0) > 1e-9:
            raise ValueError(f"masses sum to {m.sum()}, expected 1")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def normalized(cls, origin, cell, masses) -> "DensityGrid":
        m = np.asarray(masses, dtype=np.float64)
        return cls(origin, cell, m / m.sum())

    @classmethod
    def from_density(cls, fn, lo: float = -1.5, hi: float = 1.5, n: int = 256) -> "DensityGrid":
        """Evaluate ``fn(points) -> density`` at cell centres and normalise."""
        cell = (hi - lo) / n
        c = lo + cell * (np.arange(n) + 0.5)
        gx, gy = np.meshgrid(c, c)
        dens = np.asarray(fn(np.stack([gx.ravel(), gy.ravel()], axis=1))).reshape(n, n)
        return cls.normalized((lo, lo), cell, dens)

    @classmethod
    def from_points(cls, points, lo: float = -1.5, hi: float = 1.5, n: int = 256) -> "DensityGrid":
        """Histogram of points; points outside the window are dropped."""
        pts = _pts(points)
        hist, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=n, range=[[lo, hi], [lo, hi]])
        return cls.normalized((lo, lo), (hi - lo) / n, hist)

    def same_geometry(self, other: "DensityGrid") -> bool:
        return (
            self.masses.shape == other.masses.shape
            and self.origin == other.origin
            and self.cell == other.cell
        )


def tv_grid(p: DensityGrid, q: DensityGrid) -> float:
    if not p.same_geometry(q):
        raise ValueError("density grids have different geometry")
    return 0.5 * float(np.abs(p.masses - q.masses).sum())


def _smoothing_matrix(n: int, sigma_cells: float) -> np.ndarray:
    """Column-stochastic 1D Gaussian transfer matrix, truncated at 4 sigma.

    Each source cell spreads its mass over the cells within the kernel
    radius that lie on the grid; that mass is renormalised to one, so no
    mass leaves the grid.
    """
    radius = int(math.ceil(4.0 * sigma_cells))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma_cells) ** 2)
    mat = np.zeros((n, n))
    for src in range(n):
        dst = src + offsets
        keep = (dst >= 0) & (dst < n)
        w = kernel[keep]
        mat[dst[keep], src] = w / w.sum()
    return mat


def convolve_grid(p: DensityGrid, sigma: float) -> DensityGrid:
    """Smooth ``p`` with an isotropic Gaussian of std ``sigma`` (same units as the grid)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return p
    ny, nx = p.masses.shape
    sc = sigma / p.cell
    ky = _smoothing_matrix(ny, sc)
    kx = ky if nx == ny else _smoothing_matrix(nx, sc)
    out = ky @ p.masses @ kx.T
    return DensityGrid(p.origin, p.cell, out / out.sum())


# --------------------------------------------------------------------------
# Theory diagnostics


def gaussian_tail_q(r) -> float:
    """Q(r) = P(a >= r) for a ~ N(0, 1)."""
    return 0.5 * erfc(np.asarray(r, dtype=np.float64) / math.sqrt(2.0))[()]


@dataclass(frozen=True)
class ContractionQuery:
    B: float
    t: float
    delta_t: float
    gamma: float

    def __post_init__(self):
        if not self.B > 0:
            raise ValueError("B must be positive")
        if self.t < 0 or self.gamma < 0:
            raise ValueError("t and gamma must be non-negative")
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")


def contraction_lambda(query: ContractionQuery) -> float:
    """Coupling probability 2 Q(B / (2 sqrt((t + (1+gamma) dt)^2 - t^2)))."""
    q = query
    spread = (q.t + (1.0 + q.gamma) * q.delta_t) ** 2 - q.t**2
    if not spread > 0:
        raise ValueError("degenerate contraction query: zero injected variance")
    if math.isinf(q.B):
        return 0.0
    return float(2.0 * gaussian_tail_q(q.B / (2.0 * math.sqrt(spread))))
