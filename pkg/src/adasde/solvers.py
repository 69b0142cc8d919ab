"""Single-step samplers for the probability-flow ODE ``dx/dt = drift(x, t)``.

Baselines (Euler/DDIM, Heun, DPM-Solver-2) and the AdaSDE step, which first
raises the noise level from ``t`` to ``(1 + gamma) t`` by injecting fresh
Gaussian noise and then takes a midpoint step back down with a scaled
(``1 + lambda``) and time-shifted (``+ mu``) drift evaluation.

The plugin step applies the same injection/scale/shift around any host
solver's mean update. With neutral parameters every variant reduces
bit-for-bit to its host.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import PointCloud, save_points_csv
from .schedule import TimeSchedule

__all__ = [
    "GAMMA_MAX",
    "Method",
    "StepParams",
    "SamplerConfig",
    "Trajectory",
    "SamplingError",
    "euler_step",
    "heun_step",
    "dpm2_step",
    "adasde_step",
    "plugin_step",
    "step_noise",
    "sample",
    "neutral_theta",
    "fixed_gamma_theta",
    "expected_nfe",
    "write_trajectory",
]

GAMMA_MAX = 0.2

# RNG stream ids; combined with the run seed and step index.
INIT_STREAM = 0
STEP_STREAM = 1


class Method(str, enum.Enum):
    EULER = "euler"
    HEUN = "heun"
    DPM2 = "dpm2"
    ADASDE = "adasde"
    PLUGIN = "plugin"


HOSTS = (Method.EULER, Method.HEUN, Method.DPM2)


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepParams:
    """Per-step learnable quadruple.

    ``xi=None`` means the geometric midpoint ``sqrt(t_hat * t_next)``,
    resolved once the injected level ``t_hat`` is known.
    """

    gamma: float = 0.0
    xi: float | None = None
    lambda_scale: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        vals = [self.gamma, self.lambda_scale, self.mu] + ([] if self.xi is None else [self.xi])
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite step parameter in {self}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    @classmethod
    def neutral(cls, t_cur: float, t_next: float) -> "StepParams":
        return cls(0.0, math.sqrt(t_cur * t_next), 0.0, 0.0)

    def midpoint(self, t_hat: float, t_next: float) -> float:
        return math.sqrt(t_hat * t_next) if self.xi is None else self.xi

    def validate(self, t_cur: float, t_next: float, gamma_max: float = GAMMA_MAX) -> None:
        t_hat = (1.0 + min(self.gamma, gamma_max)) * t_cur
        xi = self.midpoint(t_hat, t_next)
        if not (t_next <= xi <= t_hat):
            raise ValueError(f"xi={xi} outside [{t_next}, {t_hat}]")
        if xi + self.mu <= 0:
            raise ValueError(f"evaluation time xi + mu = {xi + self.mu} must be positive")


def neutral_theta(schedule: TimeSchedule) -> tuple[StepParams, ...]:
    return tuple(StepParams.neutral(a, b) for a, b in schedule.intervals())


def fixed_gamma_theta(schedule: TimeSchedule, gamma: float) -> tuple[StepParams, ...]:
    """Same ``gamma`` on every step, neutral scale/shift, geometric midpoints."""
    return tuple(StepParams(gamma=gamma) for _ in range(schedule.n_steps))


# --------------------------------------------------------------------------
# Baseline steps


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def _first_drift(field, x, t, afs):
    # Analytic first step: the prior N(0, t^2 I) has drift x / t.
    return x / t if afs else field.drift(x, t)


def euler_step(field, x, t_cur: float, t_next: float, afs: bool = False) -> np.ndarray:
    x = _pts(x)
    if t_next == t_cur:
        return x.copy()
    return x + (t_next - t_cur) * _first_drift(field, x, t_cur, afs)


def heun_step(field, x, t_cur: float, t_next: float, afs: bool = False) -> np.ndarray:
    """Trapezoidal correction; plain Euler when stepping to ``t_next = 0``."""
    x = _pts(x)
    if t_next == t_cur:
        return x.copy()
    d_cur = _first_drift(field, x, t_cur, afs)
    x_euler = x + (t_next - t_cur) * d_cur
    if t_next == 0:
        return x_euler
    d_next = field.drift(x_euler, t_next)
    return x + (t_next - t_cur) * (0.5 * (d_cur + d_next))


def dpm2_step(field, x, t_cur: float, t_next: float, afs: bool = False) -> np.ndarray:
    """Midpoint step with the geometric midpoint ``sqrt(t_cur * t_next)``."""
    x = _pts(x)
    if t_next == t_cur:
        return x.copy()
    if t_next == 0:
        return euler_step(field, x, t_cur, t_next, afs)
    t_mid = math.sqrt(t_cur * t_next)
    x_mid = x + (t_mid - t_cur) * _first_drift(field, x, t_cur, afs)
    return x + (t_next - t_cur) * field.drift(x_mid, t_mid)


# --------------------------------------------------------------------------
# AdaSDE / plugin


def step_noise(seed: int, step: int, n_points: int, stream: int = STEP_STREAM) -> np.ndarray:
    """Counter-based per-step Gaussian draws keyed by (seed, stream, step)."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, step])))
    return gen.standard_normal((n_points, 2))


def _host_update(host: Method, field, x, t_start, t_next, theta: StepParams, afs: bool):
    """Host mean update from ``(x, t_start)`` with the (1+lambda) scale and +mu shift."""
    scale = (1.0 + theta.lambda_scale) * (t_next - t_start)
    if host is Method.EULER:
        d = x / t_start if afs else field.drift(x, t_start + theta.mu)
        return x + scale * d
    if host is Method.HEUN:
        d_cur = _first_drift(field, x, t_start, afs)
        if t_next == 0:
            return x + scale * d_cur
        x_euler = x + (t_next - t_start) * d_cur
        d_next = field.drift(x_euler, t_next + theta.mu)
        return x + scale * (0.5 * (d_cur + d_next))
    if host is Method.DPM2:
        xi = theta.midpoint(t_start, t_next)
        x_mid = x + (xi - t_start) * _first_drift(field, x, t_start, afs)
        return x + scale * field.drift(x_mid, xi + theta.mu)
    raise ValueError(f"unsupported host solver {host}")


def plugin_step(
    host,
    field,
    x,
    t_cur: float,
    t_next: float,
    theta: StepParams,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    afs: bool = False,
    gamma_max: float = GAMMA_MAX,
):
    """Noise injection to ``(1+gamma) t_cur`` followed by the host update.

    Returns ``(x_next, noise)`` where ``noise`` is the standard-normal draw
    used for injection (``None`` when no randomness was needed).
    """
    host = Method(host)
    if host not in HOSTS:
        raise ValueError(f"plugin host must be one of {[h.value for h in HOSTS]}")
    x = _pts(x)
    gamma = min(theta.gamma, gamma_max)
    t_hat = (1.0 + gamma) * t_cur
    if host is Method.DPM2:
        theta.validate(t_cur, t_next, gamma_max)
    elif t_next + theta.mu <= 0 or t_hat + theta.mu <= 0:
        raise ValueError(f"shifted evaluation time must be positive (mu={theta.mu})")
    if gamma > 0:
        if noise is None:
            if rng is None:
                raise ValueError("gamma > 0 needs an rng or explicit noise")
            noise = rng.standard_normal(x.shape)
        x = x + math.sqrt(t_hat * t_hat - t_cur * t_cur) * noise
    x_next = _host_update(host, field, x, t_hat, t_next, theta, afs)
    return x_next, noise


def adasde_step(field, x, t_cur, t_next, theta: StepParams, rng=None, noise=None, afs=False, gamma_max=GAMMA_MAX):
    """AdaSDE step: injection, Euler sub-step to ``xi``, scaled midpoint update."""
    return plugin_step(Method.DPM2, field, x, t_cur, t_next, theta, rng, noise, afs, gamma_max)


# --------------------------------------------------------------------------
# Sampling loop


@dataclass(frozen=True)
class SamplerConfig:
    schedule: TimeSchedule
    method: Method = Method.EULER
    host: Method | None = None
    theta: tuple[StepParams, ...] | None = None
    afs: bool = False
    seed: int = 0
    gamma_max: float = GAMMA_MAX
    terminal_noise: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.host is not None:
            object.__setattr__(self, "host", Method(self.host))
        if self.method is Method.PLUGIN and self.host not in HOSTS:
            raise ValueError("plugin sampling needs host in {euler, heun, dpm2}")
        if self.theta is not None:
            theta = tuple(self.theta)
            if len(theta) != self.schedule.n_steps:
                raise ValueError(f"theta has {len(theta)} entries for {self.schedule.n_steps} steps")
            for th, (a, b) in zip(theta, self.schedule.intervals()):
                th.validate(a, b, self.gamma_max)
            object.__setattr__(self, "theta", theta)

    @property
    def stochastic_host(self) -> Method | None:
        if self.method is Method.ADASDE:
            return Method.DPM2
        if self.method is Method.PLUGIN:
            return self.host
        return None


@dataclass
class Trajectory:
    """States recorded at the schedule levels (``states[0]`` is the initial noise)."""

    times: np.ndarray
    states: list[np.ndarray]
    noise_draws: list[np.ndarray | None]
    nfe: int
    method: str
    seed: int
    theta: tuple[StepParams, ...] | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, i: int) -> np.ndarray:
        return self.states[i]


class _CountingField:
    def __init__(self, field):
        self.field = field
        self.calls = 0

    def drift(self, x, t):
        self.calls += 1
        return self.field.drift(x, t)

    def score(self, x, t):
        self.calls += 1
        return self.field.score(x, t)


def initial_noise(seed: int, n_points: int, t_max: float) -> np.ndarray:
    return t_max * step_noise(seed, 0, n_points, stream=INIT_STREAM)


def sample(
    config: SamplerConfig,
    field,
    n_points: int | None = None,
    record: bool = True,
    x_init: np.ndarray | None = None,
) -> Trajectory:
    """Run the configured sampler from ``N(0, t_N^2 I)`` down the schedule."""
    sched = config.schedule
    if x_init is None:
        if n_points is None:
            raise ValueError("need n_points or x_init")
        x = initial_noise(config.seed, n_points, float(sched.levels[0]))
    else:
        x = np.array(_pts(x_init), dtype=np.float64)
    counter = _CountingField(field)
    host = config.stochastic_host
    theta = config.theta
    if host is not None and theta is None:
        theta = neutral_theta(sched)
    states = [x]
    noises: list[np.ndarray | None] = []
    for i, (t_cur, t_next) in enumerate(sched.intervals()):
        afs = config.afs and i == 0
        if host is None:
            x = _BASELINES[config.method](counter, x, t_cur, t_next, afs)
            noises.append(None)
        else:
            th = theta[i]
            if i == sched.n_steps - 1 and not config.terminal_noise and th.gamma > 0:
                th = StepParams(0.0, th.xi, th.lambda_scale, th.mu)
            eps = step_noise(config.seed, i + 1, len(x)) if th.gamma > 0 else None
            x, eps = plugin_step(host, counter, x, t_cur, t_next, th, noise=eps, afs=afs, gamma_max=config.gamma_max)
            noises.append(eps)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after step {i} (t={t_cur} -> {t_next})")
        if record:
            states.append(x)
    if not record:
        states = [states[0], x]
        times = np.array([sched.levels[0], sched.levels[-1]])
    else:
        times = np.array(sched.levels)
    return Trajectory(times, states, noises, counter.calls, config.method.value, config.seed, theta)


_BASELINES = {Method.EULER: euler_step, Method.HEUN: heun_step, Method.DPM2: dpm2_step}


def expected_nfe(method, n_steps: int, afs: bool = False, ends_at_zero: bool = False) -> int:
    method = Method(method)
    per_step = 1 if method is Method.EULER else 2
    nfe = per_step * n_steps - (1 if afs else 0)
    if ends_at_zero and method is not Method.EULER:
        nfe -= 1
    return nfe


def write_trajectory(out_dir, traj: Trajectory) -> None:
    """One CSV per recorded time plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (t, pts) in enumerate(zip(traj.times, traj.states)):
        name = f"state_{i:03d}.csv"
        save_points_csv(out / name, pts)
        files.append({"index": i, "time": float(t), "file": name})
    manifest = {
        "method": traj.method,
        "seed": traj.seed,
        "nfe": traj.nfe,
        "theta": None if traj.theta is None else [asdict(th) for th in traj.theta],
        "states": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
