"""Stagewise distillation of per-step AdaSDE parameters against a teacher.

A teacher trajectory is simulated on a refined schedule (``m`` extra levels
per student interval) from the same initial noise as the student. The
student is then marched step by step; at step ``n`` its four parameters are
moved by finite-difference gradient descent on the MSE between the student
state and the teacher state at the same level, with upstream parameters
frozen.

Optimisation runs in normalised coordinates per step::

    s    injected-noise ratio, gamma = sqrt(1 + s^2) - 1
    r    midpoint position, xi = sqrt(t_hat t_next) * (t_next / t_hat)^(r - 1/2)
    lam  output scale offset
    m    relative time shift, mu = m * xi

so that ``xi`` always stays inside ``(t_next, t_hat)`` and the noise
amplitude is linear in ``s``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .schedule import Scheme, TimeSchedule, build_schedule, refine_schedule
from .solvers import (
    GAMMA_MAX,
    Method,
    SamplerConfig,
    StepParams,
    Trajectory,
    initial_noise,
    plugin_step,
    sample,
)

__all__ = [
    "DistillConfig",
    "ThetaTable",
    "build_teacher_schedule",
    "run_teacher",
    "optimize_theta",
    "endpoint_mse",
    "save_theta_table",
    "load_theta_table",
]

log = logging.getLogger(__name__)

# Box for the normalised coordinates (s bounds come from the gamma bounds).
R_BOUNDS = (0.02, 0.98)
LAM_BOUNDS = (-0.9, 1.0)
SHIFT_BOUNDS = (-0.9, 2.0)

# RNG stream ids for distillation batches.
_INIT_STREAM = 20
_STEP_STREAM = 21
_EVAL_STREAM = 22


@dataclass(frozen=True)
class DistillConfig:
    n_steps: int = 5
    scheme: Scheme = Scheme.UNIFORM
    m: int = 3
    teacher_method: Method = Method.DPM2
    host: Method = Method.DPM2
    learning_rate: float = 0.2
    n_rounds: int = 5
    batch_size: int = 2000
    inner_iters: int = 10
    gamma_min: float = 0.0
    gamma_max: float = GAMMA_MAX
    fd_rel: float = 1e-3
    max_halvings: int = 10
    afs: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "teacher_method", Method(self.teacher_method))
        object.__setattr__(self, "host", Method(self.host))
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.n_steps < 1 or self.n_rounds < 1 or self.batch_size < 1 or self.inner_iters < 1:
            raise ValueError("n_steps, n_rounds, batch_size and inner_iters must be positive")
        if not 0 <= self.gamma_min <= self.gamma_max <= GAMMA_MAX:
            raise ValueError(f"need 0 <= gamma_min <= gamma_max <= {GAMMA_MAX}")

    def student_schedule(self) -> TimeSchedule:
        return build_schedule(self.scheme, self.n_steps)

    def digest(self) -> str:
        blob = json.dumps(_plain(asdict(self)), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if hasattr(obj, "value"):
        return obj.value
    return obj


@dataclass
class ThetaTable:
    steps: tuple[StepParams, ...]
    metadata: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def n_params(self) -> int:
        return 4 * len(self.steps)


# --------------------------------------------------------------------------
# Teacher


def build_teacher_schedule(student: TimeSchedule, m: int) -> TimeSchedule:
    """Student schedule with ``m`` levels inserted per interval (student levels kept verbatim)."""
    return refine_schedule(student, m)


def run_teacher(field, teacher_schedule: TimeSchedule, x_init, method=Method.DPM2) -> Trajectory:
    """Deterministic teacher run recorded at every teacher level."""
    method = Method(method)
    if method not in (Method.EULER, Method.HEUN, Method.DPM2):
        raise ValueError("teacher must be a deterministic solver")
    return sample(SamplerConfig(teacher_schedule, method), field, x_init=x_init, record=True)


# --------------------------------------------------------------------------
# Parameter maps


def _s_of_gamma(gamma: float) -> float:
    return math.sqrt((1.0 + gamma) ** 2 - 1.0)


def _gamma_of_s(s: float) -> float:
    return math.sqrt(1.0 + s * s) - 1.0


def _to_step_params(u, t_cur: float, t_next: float) -> StepParams:
    s, r, lam, shift = (float(v) for v in u)
    gamma = _gamma_of_s(abs(s))
    t_hat = (1.0 + gamma) * t_cur
    xi = math.sqrt(t_hat * t_next) * (t_next / t_hat) ** (r - 0.5)
    xi = min(max(xi, t_next), t_hat)
    return StepParams(gamma, xi, lam, shift * xi)


def _from_step_params(th: StepParams, t_cur: float, t_next: float) -> np.ndarray:
    gamma = th.gamma
    t_hat = (1.0 + gamma) * t_cur
    xi = th.midpoint(t_hat, t_next)
    r = 0.5 + math.log(xi / math.sqrt(t_hat * t_next)) / math.log(t_next / t_hat)
    return np.array([_s_of_gamma(gamma), r, th.lambda_scale, th.mu / xi])


def _neutral_u() -> np.ndarray:
    return np.array([0.0, 0.5, 0.0, 0.0])


# --------------------------------------------------------------------------
# Optimisation


def _mse(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.sum((x - y) ** 2, axis=1)))


class _StepProblem:
    """One student step with frozen input state, noise draw and target."""

    def __init__(self, field, host, x, t_cur, t_next, eps, target, afs):
        self.field, self.host = field, host
        self.x, self.t_cur, self.t_next = x, t_cur, t_next
        self.eps, self.target, self.afs = eps, target, afs

    def advance(self, u) -> np.ndarray:
        th = _to_step_params(u, self.t_cur, self.t_next)
        noise = None
        if th.gamma > 0:
            noise = -self.eps if u[0] < 0 else self.eps
        out, _ = plugin_step(self.host, self.field, self.x, self.t_cur, self.t_next, th, noise=noise, afs=self.afs)
        return out

    def loss(self, u) -> float:
        return _mse(self.advance(u), self.target)


def _project(u, s_bounds, fixed_s: bool) -> np.ndarray:
    u = np.array(u, dtype=np.float64)
    u[0] = 0.0 if fixed_s else min(max(u[0], s_bounds[0]), s_bounds[1])
    u[1] = min(max(u[1], R_BOUNDS[0]), R_BOUNDS[1])
    u[2] = min(max(u[2], LAM_BOUNDS[0]), LAM_BOUNDS[1])
    u[3] = min(max(u[3], SHIFT_BOUNDS[0]), SHIFT_BOUNDS[1])
    return u


def _fd_jacobian(problem: _StepProblem, u, rel: float, fixed_s: bool) -> np.ndarray:
    """Central-difference Jacobian of the student state, shape (n_points * 2, 4).

    All probes reuse the same noise draw (common random numbers).
    """
    cols = []
    for j in range(4):
        if j == 0 and fixed_s:
            cols.append(np.zeros(problem.x.size))
            continue
        h = rel * max(abs(u[j]), 1.0)
        up, dn = u.copy(), u.copy()
        up[j] += h
        dn[j] -= h
        cols.append(((problem.advance(up) - problem.advance(dn)) / (2.0 * h)).ravel())
    return np.stack(cols, axis=1)


def _descent_direction(problem: _StepProblem, u, rel: float, fixed_s: bool, damping: float = 1e-6):
    """Gauss-Newton direction for the batch MSE and the MSE gradient.

    ``G = 2 J^T J / n`` preconditions the gradient ``g = 2 J^T r / n``; a small
    ridge keeps the solve well posed when a coordinate is inactive.
    """
    jac = _fd_jacobian(problem, u, rel, fixed_s)
    resid = (problem.advance(u) - problem.target).ravel()
    n = len(problem.x)
    g = 2.0 * jac.T @ resid / n
    gram = 2.0 * jac.T @ jac / n
    ridge = damping * max(np.trace(gram) / 4.0, 1e-300)
    direction = np.linalg.solve(gram + ridge * np.eye(4), g)
    if fixed_s:
        direction[0] = 0.0
    return direction, g


def _cosine_lr(base: float, k: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * k / total))


def optimize_theta(field, config: DistillConfig, init: ThetaTable | None = None) -> ThetaTable:
    """Stagewise finite-difference descent on per-step teacher alignment.

    Each round draws ``batch_size`` shared initial noises, re-simulates the
    teacher, and sweeps the student steps in sampling order. The step-``n``
    parameters get ``inner_iters`` descent updates on the MSE to the teacher
    state; an update is only accepted if it does not increase the batch loss
    (the step size is halved until it does). The descent direction is the
    gradient preconditioned by the Gauss-Newton matrix of the finite-difference
    Jacobian, so one learning rate fits every noise level and coordinate.
    """
    student = config.student_schedule()
    teacher_sched = build_teacher_schedule(student, config.m)
    stride = config.m + 1
    intervals = list(student.intervals())
    n = len(intervals)
    s_bounds = (_s_of_gamma(config.gamma_min), _s_of_gamma(config.gamma_max))
    if init is None:
        us = [_project(_neutral_u(), s_bounds, i == n - 1) for i in range(n)]
    else:
        if len(init) != n:
            raise ValueError("initial theta has the wrong length")
        us = [_project(_from_step_params(th, a, b), s_bounds, i == n - 1) for i, (th, (a, b)) in enumerate(zip(init.steps, intervals))]
    history: list[dict] = []
    total = config.n_rounds * config.inner_iters
    t_max = float(student.levels[0])
    for rnd in range(config.n_rounds):
        x = initial_noise(_seed(config.seed, _INIT_STREAM, rnd), config.batch_size, t_max)
        teacher = run_teacher(field, teacher_sched, x, config.teacher_method)
        for i, (t_cur, t_next) in enumerate(intervals):
            fixed_s = i == n - 1
            eps = _noise(config.seed, rnd, i, config.batch_size)
            target = teacher.states[(i + 1) * stride]
            prob = _StepProblem(field, config.host, x, t_cur, t_next, eps, target, config.afs and i == 0)
            u = us[i]
            loss0 = loss = prob.loss(u)
            if not math.isfinite(loss0):
                raise FloatingPointError(f"non-finite distillation loss at round {rnd}, step {i}")
            for it in range(config.inner_iters):
                if loss == 0.0:
                    break
                direction, _ = _descent_direction(prob, u, config.fd_rel, fixed_s)
                lr = _cosine_lr(config.learning_rate, rnd * config.inner_iters + it, total)
                for _ in range(config.max_halvings + 1):
                    cand = _project(u - lr * direction, s_bounds, fixed_s)
                    cand_loss = prob.loss(cand)
                    if cand_loss <= loss:
                        u, loss = cand, cand_loss
                        break
                    lr *= 0.5
                else:
                    break
            us[i] = u
            if not fixed_s and u[0] >= s_bounds[1]:
                log.warning("gamma at upper bound %.3g for step %d", config.gamma_max, i)
            history.append({"round": rnd, "step": i, "loss_before": loss0, "loss_after": loss})
            x = prob.advance(u)
    steps = tuple(_to_step_params(u, a, b) for u, (a, b) in zip(us, intervals))
    meta = {
        "config_hash": config.digest(),
        "n_steps": n,
        "m": config.m,
        "scheme": config.scheme.value,
        "host": config.host.value,
        "seed": config.seed,
    }
    return ThetaTable(steps, meta, history)


def _seed(seed: int, stream: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, stream, k]).generate_state(1)[0])


def _noise(seed: int, rnd: int, step: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _STEP_STREAM, rnd, step])))
    return gen.standard_normal((n, 2))


def endpoint_mse(field, config: DistillConfig, theta, n_points: int = 2000, seed: int = 12345) -> float:
    """Held-out mean endpoint MSE between student (with ``theta``) and teacher."""
    student = config.student_schedule()
    teacher_sched = build_teacher_schedule(student, config.m)
    x = initial_noise(_seed(seed, _EVAL_STREAM, 0), n_points, float(student.levels[0]))
    teacher = run_teacher(field, teacher_sched, x, config.teacher_method)
    steps = theta.steps if isinstance(theta, ThetaTable) else tuple(theta)
    method = Method.ADASDE if config.host is Method.DPM2 else Method.PLUGIN
    host = None if method is Method.ADASDE else config.host
    cfg = SamplerConfig(student, method, host, steps, config.afs, seed)
    out = sample(cfg, field, x_init=x, record=False)
    return _mse(out.final, teacher.final)


# --------------------------------------------------------------------------
# Persistence


def save_theta_table(out_dir, table: ThetaTable) -> None:
    """``theta.csv`` (n, gamma, xi, lambda, mu), ``theta_manifest.json``, ``loss_history.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "theta.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "gamma", "xi", "lambda", "mu"])
        for i, th in enumerate(table.steps):
            w.writerow([i, repr(th.gamma), repr(th.xi), repr(th.lambda_scale), repr(th.mu)])
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "step", "loss_before", "loss_after"])
        for row in table.history:
            w.writerow([row["round"], row["step"], repr(row["loss_before"]), repr(row["loss_after"])])
    (out / "theta_manifest.json").write_text(json.dumps(table.metadata, indent=2, sort_keys=True) + "\n")


def load_theta_table(path) -> ThetaTable:
    """Load from a directory written by ``save_theta_table`` or a bare ``theta.csv``."""
    path = Path(path)
    csv_path = path / "theta.csv" if path.is_dir() else path
    steps = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            xi = None if row["xi"] in ("None", "") else float(row["xi"])
            steps.append(StepParams(float(row["gamma"]), xi, float(row["lambda"]), float(row["mu"])))
    meta_path = csv_path.parent / "theta_manifest.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return ThetaTable(tuple(steps), meta)
