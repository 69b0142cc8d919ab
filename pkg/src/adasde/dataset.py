"""Synthetic 2D datasets and the exact score of their Gaussian-smoothed marginals."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PointCloud",
    "MixtureScoreOracle",
    "make_double_circle",
    "double_circle_oracle",
    "make_gaussian",
    "make_gaussian_mixture",
    "oracle_log_density",
    "oracle_score",
    "oracle_drift",
    "sample_oracle",
    "save_points_csv",
    "load_points_csv",
]

# Upper bound on the size of the (queries x centers) block held in memory.
_BLOCK_ELEMS = 1 << 21


@dataclass(frozen=True)
class PointCloud:
    """An (n, 2) array of points and the seed that generated it."""

    points: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must have shape (n, 2), got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def subsample(self, n: int, seed: int = 0) -> "PointCloud":
        """Deterministic subsample without replacement (identity if n >= len)."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return PointCloud(self.points[idx], self.seed)

    def split(self, n_first: int) -> tuple["PointCloud", "PointCloud"]:
        return PointCloud(self.points[:n_first], self.seed), PointCloud(self.points[n_first:], self.seed)


def _ring_points(n_points, r_outer, r_inner, rng):
    n_outer = (n_points + 1) // 2
    radii = np.where(np.arange(n_points) < n_outer, r_outer, r_inner)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
    return radii[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def make_double_circle(
    n_points: int = 20000,
    r_outer: float = 0.8,
    r_inner: float = 0.6,
    noise_sigma: float = 0.1,
    seed: int = 0,
) -> PointCloud:
    """Two concentric noisy rings.

    The first ``ceil(n/2)`` points belong to the outer ring, the rest to the
    inner one. Angles are uniform; each point gets isotropic Gaussian noise
    of std ``noise_sigma``.
    """
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if r_outer <= 0 or r_inner <= 0:
        raise ValueError("radii must be positive")
    rng = np.random.default_rng(seed)
    clean = _ring_points(n_points, r_outer, r_inner, rng)
    noise = rng.standard_normal(clean.shape)
    return PointCloud(clean + noise_sigma * noise, seed)


def make_gaussian(n_points: int, sigma0: float, seed: int = 0, mean=(0.0, 0.0)) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(np.asarray(mean) + sigma0 * rng.standard_normal((n_points, 2)), seed)


def make_gaussian_mixture(n_points: int, means, sigma: float, seed: int = 0) -> PointCloud:
    means = np.asarray(means, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = rng.integers(len(means), size=n_points)
    return PointCloud(means[k] + sigma * rng.standard_normal((n_points, 2)), seed)


# --------------------------------------------------------------------------
# Mixture oracle


@dataclass(frozen=True)
class MixtureScoreOracle:
    """Equal-weight Gaussian mixture sum_k N(c_k, base_sigma^2 I) / K.

    At noise level ``t`` the marginal is the same mixture with per-component
    variance ``t^2 + base_sigma^2``, so its score is available in closed form.
    The object is immutable and safe to share across threads.
    """

    centers: PointCloud
    base_sigma: float = 0.0

    def __post_init__(self):
        if self.base_sigma < 0:
            raise ValueError("base_sigma must be non-negative")
        c = self.centers.points
        object.__setattr__(self, "_c", c)
        object.__setattr__(self, "_half_sq", 0.5 * np.sum(c * c, axis=1))

    @classmethod
    def from_points(cls, points, base_sigma: float = 0.0) -> "MixtureScoreOracle":
        return cls(PointCloud(points), base_sigma)

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    def variance(self, t: float) -> float:
        return t * t + self.base_sigma**2

    def subsample(self, k: int, seed: int = 0) -> "MixtureScoreOracle":
        """Keep ``k`` centers, for cheap solver-in-the-loop use."""
        return MixtureScoreOracle(self.centers.subsample(k, seed), self.base_sigma)

    def log_density(self, x, t):
        return oracle_log_density(self, x, t)

    def score(self, x, t):
        return oracle_score(self, x, t)

    def drift(self, x, t):
        return oracle_drift(self, x, t)

    def denoise(self, x, t):
        """Posterior mean E[x_0 | x_t = x]."""
        x = np.asarray(x, dtype=np.float64)
        return x + t * t * oracle_score(self, x, t)


def _logits(oracle: MixtureScoreOracle, x: np.ndarray, var: float) -> np.ndarray:
    # The -|x|^2 / 2var term is constant per row and cancels in the softmax.
    return (x @ oracle._c.T - oracle._half_sq) / var


def _blocks(n_rows: int, n_cols: int):
    step = max(1, _BLOCK_ELEMS // max(n_cols, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def _as_queries(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def oracle_log_density(oracle: MixtureScoreOracle, x, t) -> np.ndarray:
    """log p_t(x) of the smoothed mixture."""
    xq, single = _as_queries(x)
    var = oracle.variance(float(t))
    out = np.empty(len(xq))
    for sl in _blocks(len(xq), oracle.n_centers):
        xb = xq[sl]
        d2 = np.sum((xb[:, None, :] - oracle._c[None, :, :]) ** 2, axis=-1)
        a = -0.5 * d2 / var
        amax = a.max(axis=1)
        out[sl] = amax + np.log(np.exp(a - amax[:, None]).sum(axis=1))
    out += -np.log(oracle.n_centers) - np.log(2.0 * np.pi * var)
    return out[0] if single else out


def oracle_score(oracle: MixtureScoreOracle, x, t) -> np.ndarray:
    """Exact score grad_x log p_t(x), stabilised with log-sum-exp."""
    t = float(t)
    if not t > 0:
        raise ValueError(f"noise level must be positive, got {t}")
    xq, single = _as_queries(x)
    var = oracle.variance(t)
    out = np.empty_like(xq)
    for sl in _blocks(len(xq), oracle.n_centers):
        a = _logits(oracle, xq[sl], var)
        a -= a.max(axis=1, keepdims=True)
        w = np.exp(a)
        w /= w.sum(axis=1, keepdims=True)
        out[sl] = (w @ oracle._c - xq[sl]) / var
    return out[0] if single else out


def oracle_drift(oracle: MixtureScoreOracle, x, t) -> np.ndarray:
    """Probability-flow drift dx/dt = -t * score under sigma(t) = t."""
    return -float(t) * oracle_score(oracle, x, t)


def double_circle_oracle(
    n_points: int = 20000,
    r_outer: float = 0.8,
    r_inner: float = 0.6,
    noise_sigma: float = 0.1,
    seed: int = 0,
) -> MixtureScoreOracle:
    """Oracle whose p_0 is the distribution the noisy double-circle set is drawn from.

    Centers are the noise-free ring points of ``make_double_circle`` with the
    same arguments; the ring noise becomes ``base_sigma``.
    """
    rng = np.random.default_rng(seed)
    clean = _ring_points(n_points, r_outer, r_inner, rng)
    return MixtureScoreOracle(PointCloud(clean, seed), noise_sigma)


def sample_oracle(oracle: MixtureScoreOracle, n: int, seed: int = 0, t: float = 0.0) -> PointCloud:
    """Draw ``n`` samples from the oracle's marginal at noise level ``t``."""
    rng = np.random.default_rng(seed)
    k = rng.integers(oracle.n_centers, size=n)
    std = np.sqrt(oracle.variance(t))
    return PointCloud(oracle.centers.points[k] + std * rng.standard_normal((n, 2)), seed)


# --------------------------------------------------------------------------
# CSV persistence


def save_points_csv(path, cloud: PointCloud | np.ndarray) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    with open(path, "w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in pts.tolist():
            fh.write(f"{x!r},{y!r}\n")


def load_points_csv(path, seed: int | None = None) -> PointCloud:
    pts = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return PointCloud(pts, seed)
