"""Discrete noise-level schedules t_N > ... > t_0 for few-step sampling.

Three schemes are supported:

* ``uniform``    -- the VP "time uniform" discretisation, evaluated through the
                    closed-form sigma(t) of a linear-beta VP process.
* ``polynomial`` -- the EDM power-law schedule (rho = 7 by default).
* ``logsnr``     -- levels uniformly spaced in log(sigma).

An N-step schedule holds N + 1 levels. Levels are stored in sampling order,
i.e. descending from ``sigma_max`` to ``sigma_min``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Scheme",
    "TimeSchedule",
    "VPCoefficients",
    "vp_coefficients",
    "vp_sigma",
    "vp_sigma_inv",
    "build_uniform_schedule",
    "build_polynomial_schedule",
    "build_logsnr_schedule",
    "build_schedule",
    "refine_schedule",
    "save_schedule",
    "load_schedule",
]

SIGMA_MAX = 80.0
SIGMA_MIN = 0.002
UNIFORM_RHO = 1.0
UNIFORM_EPS_S = 1e-3
POLYNOMIAL_RHO = 7.0


class Scheme(str, enum.Enum):
    UNIFORM = "uniform"
    POLYNOMIAL = "polynomial"
    LOGSNR = "logsnr"


@dataclass(frozen=True)
class TimeSchedule:
    """Descending noise levels plus the parameters that produced them."""

    levels: np.ndarray
    scheme: Scheme
    sigma_max: float
    sigma_min: float
    rho: float = 1.0
    eps_s: float = UNIFORM_EPS_S

    def __post_init__(self):
        levels = np.array(self.levels, dtype=np.float64)
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        _validate_levels(levels, self.sigma_max, self.sigma_min)

    @property
    def n_steps(self) -> int:
        return len(self.levels) - 1

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def intervals(self):
        """Yield ``(t_cur, t_next)`` pairs in sampling order."""
        for i in range(self.n_steps):
            yield float(self.levels[i]), float(self.levels[i + 1])

    def to_text(self) -> str:
        return "".join(f"{v!r}\n" for v in self.levels.tolist())

    def __eq__(self, other):
        if not isinstance(other, TimeSchedule):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and np.array_equal(self.levels, other.levels)
            and (self.sigma_max, self.sigma_min, self.rho, self.eps_s)
            == (other.sigma_max, other.sigma_min, other.rho, other.eps_s)
        )

    def __hash__(self):
        return hash((self.scheme, self.levels.tobytes()))


def _validate_levels(levels: np.ndarray, sigma_max: float, sigma_min: float) -> None:
    if levels.ndim != 1 or len(levels) < 2:
        raise ValueError("a schedule needs at least two levels")
    if not np.all(np.isfinite(levels)):
        raise ValueError("schedule levels must be finite")
    if np.any(levels <= 0):
        raise ValueError("schedule levels must be positive")
    if np.any(np.diff(levels) >= 0):
        raise ValueError("schedule levels must be strictly decreasing")
    if not math.isclose(levels[0], sigma_max, rel_tol=1e-9):
        raise ValueError(f"first level {levels[0]} != sigma_max {sigma_max}")
    if not math.isclose(levels[-1], sigma_min, rel_tol=1e-9):
        raise ValueError(f"last level {levels[-1]} != sigma_min {sigma_min}")


def _check_range(n_steps: int, sigma_max: float, sigma_min: float) -> None:
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError(f"n_steps must be a positive integer, got {n_steps}")
    if not (0.0 < sigma_min < sigma_max) or not math.isfinite(sigma_max):
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")


# --------------------------------------------------------------------------
# VP time-uniform scheme


@dataclass(frozen=True)
class VPCoefficients:
    beta_d: float
    beta_min: float


def vp_coefficients(sigma_max: float, sigma_min: float, eps_s: float) -> VPCoefficients:
    """Linear-beta VP coefficients so that sigma(1) = sigma_max, sigma(eps_s) = sigma_min."""
    log_max = math.log1p(sigma_max**2)
    log_min = math.log1p(sigma_min**2)
    with np.errstate(all="ignore"):
        beta_d = 2.0 * (log_min / eps_s - log_max) / (eps_s - 1.0) if eps_s != 1.0 else math.inf
    beta_min = log_max - 0.5 * beta_d
    if not (math.isfinite(beta_d) and math.isfinite(beta_min)):
        raise ValueError(f"degenerate VP coefficients for eps_s={eps_s}")
    return VPCoefficients(beta_d, beta_min)


def vp_sigma(t, coef: VPCoefficients):
    """sigma(t) = sqrt(exp(0.5 beta_d t^2 + beta_min t) - 1)."""
    t = np.asarray(t, dtype=np.float64)
    return np.sqrt(np.expm1(0.5 * coef.beta_d * t**2 + coef.beta_min * t))


def vp_sigma_inv(sigma, coef: VPCoefficients):
    sigma = np.asarray(sigma, dtype=np.float64)
    root = np.sqrt(coef.beta_min**2 + 2.0 * coef.beta_d * np.log1p(sigma**2))
    return (root - coef.beta_min) / coef.beta_d


def build_uniform_schedule(
    n_steps: int,
    sigma_max: float = SIGMA_MAX,
    sigma_min: float = SIGMA_MIN,
    rho: float = UNIFORM_RHO,
    eps_s: float = UNIFORM_EPS_S,
) -> TimeSchedule:
    """VP time-uniform schedule.

    The interpolation parameter runs over ``i = 0..N`` with denominator ``N``
    so that an N-step schedule has N + 1 levels. Both endpoints are written
    exactly instead of going through ``vp_sigma``.
    """
    _check_range(n_steps, sigma_max, sigma_min)
    if not (0.0 < eps_s < 1.0):
        raise ValueError(f"eps_s must lie in (0, 1), got {eps_s}")
    coef = vp_coefficients(sigma_max, sigma_min, eps_s)
    frac = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    t_temp = (1.0 + frac * (eps_s ** (1.0 / rho) - 1.0)) ** rho
    levels = vp_sigma(t_temp, coef)
    if not np.all(np.isfinite(levels)):
        raise ValueError("non-finite level in uniform schedule")
    levels[0] = sigma_max
    levels[-1] = sigma_min
    return TimeSchedule(levels, Scheme.UNIFORM, sigma_max, sigma_min, rho, eps_s)


def build_polynomial_schedule(
    n_steps: int,
    sigma_max: float = SIGMA_MAX,
    sigma_min: float = SIGMA_MIN,
    rho: float = POLYNOMIAL_RHO,
) -> TimeSchedule:
    _check_range(n_steps, sigma_max, sigma_min)
    if rho <= 0:
        raise ValueError("rho must be positive")
    frac = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    a, b = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
    levels = (a + frac * (b - a)) ** rho
    levels[0] = sigma_max
    levels[-1] = sigma_min
    return TimeSchedule(levels, Scheme.POLYNOMIAL, sigma_max, sigma_min, rho)


def build_logsnr_schedule(
    n_steps: int, sigma_max: float = SIGMA_MAX, sigma_min: float = SIGMA_MIN
) -> TimeSchedule:
    _check_range(n_steps, sigma_max, sigma_min)
    frac = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    levels = np.exp(math.log(sigma_max) + frac * (math.log(sigma_min) - math.log(sigma_max)))
    levels[0] = sigma_max
    levels[-1] = sigma_min
    return TimeSchedule(levels, Scheme.LOGSNR, sigma_max, sigma_min, 1.0)


def build_schedule(scheme, n_steps: int, sigma_max=SIGMA_MAX, sigma_min=SIGMA_MIN, rho=None, eps_s=UNIFORM_EPS_S):
    """Dispatch on ``scheme`` with the per-scheme default ``rho``."""
    scheme = Scheme(scheme)
    if scheme is Scheme.UNIFORM:
        return build_uniform_schedule(n_steps, sigma_max, sigma_min, UNIFORM_RHO if rho is None else rho, eps_s)
    if scheme is Scheme.POLYNOMIAL:
        return build_polynomial_schedule(n_steps, sigma_max, sigma_min, POLYNOMIAL_RHO if rho is None else rho)
    return build_logsnr_schedule(n_steps, sigma_max, sigma_min)


# --------------------------------------------------------------------------
# Refinement (teacher schedules)


def _warp(schedule: TimeSchedule):
    """Return (forward, inverse) maps into the scheme's interpolation coordinate."""
    if schedule.scheme is Scheme.UNIFORM:
        coef = vp_coefficients(schedule.sigma_max, schedule.sigma_min, schedule.eps_s)
        rho = schedule.rho
        return (
            lambda s: vp_sigma_inv(s, coef) ** (1.0 / rho),
            lambda u: vp_sigma(u**rho, coef),
        )
    if schedule.scheme is Scheme.POLYNOMIAL:
        rho = schedule.rho
        return (lambda s: s ** (1.0 / rho), lambda u: u**rho)
    return (np.log, np.exp)


def refine_schedule(schedule: TimeSchedule, m: int) -> TimeSchedule:
    """Insert ``m`` levels inside every interval of ``schedule``.

    New levels are spaced uniformly in the scheme's own interpolation
    coordinate; the original levels are copied verbatim so they sit at
    indices ``0, m+1, 2(m+1), ...`` of the result.
    """
    if int(m) != m or m < 0:
        raise ValueError(f"m must be a non-negative integer, got {m}")
    if m == 0:
        return schedule
    fwd, inv = _warp(schedule)
    u = fwd(schedule.levels)
    out = np.empty(schedule.n_steps * (m + 1) + 1)
    frac = np.arange(1, m + 1) / (m + 1)
    for i in range(schedule.n_steps):
        base = i * (m + 1)
        out[base] = schedule.levels[i]
        out[base + 1 : base + m + 1] = inv(u[i] + frac * (u[i + 1] - u[i]))
    out[-1] = schedule.levels[-1]
    return TimeSchedule(out, schedule.scheme, schedule.sigma_max, schedule.sigma_min, schedule.rho, schedule.eps_s)


# --------------------------------------------------------------------------
# Plain-text persistence: one level per line, shortest round-trip decimal.


def save_schedule(path, schedule: TimeSchedule) -> None:
    header = (
        f"# scheme={schedule.scheme.value} sigma_max={schedule.sigma_max!r} "
        f"sigma_min={schedule.sigma_min!r} rho={schedule.rho!r} eps_s={schedule.eps_s!r}\n"
    )
    Path(path).write_text(header + schedule.to_text())


def load_schedule(path) -> TimeSchedule:
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].split():
            key, value = item.split("=")
            meta[key] = value
        lines = lines[1:]
    levels = np.array([float(v) for v in lines if v.strip()])
    return TimeSchedule(
        levels,
        Scheme(meta.get("scheme", "polynomial")),
        float(meta.get("sigma_max", levels[0])),
        float(meta.get("sigma_min", levels[-1])),
        float(meta.get("rho", 1.0)),
        float(meta.get("eps_s", UNIFORM_EPS_S)),
    )
