"""Error-decomposition study and config-driven experiment pipelines.

The decomposition compares three 2D W1 distances per (solver, gamma, steps):

* total error           W1(generated, ground truth)
* gradient error        W1(generated, regenerated)
* discretization error  W1(regenerated, ground truth)

where *generated* runs the sampler from ``T = sigma_max`` and *regenerated*
starts from ground-truth points perturbed to ``t_mid`` (i.e. the exact
marginal there) and runs the same sampler for ``partial_fraction`` of the
step budget down to ``sigma_min``. The regenerated run therefore carries
no error from the high-noise part of the trajectory.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .dataset import (
    MixtureScoreOracle,
    PointCloud,
    double_circle_oracle,
    load_points_csv,
    make_double_circle,
    sample_oracle,
    save_points_csv,
)
from .distill import DistillConfig, endpoint_mse, load_theta_table, optimize_theta, save_theta_table
from .metrics import exact_w1_small, sliced_w1
from .schedule import Scheme, TimeSchedule, build_schedule, save_schedule
from .score_model import MlpField, TrainConfig, load_params, save_params, train
from .solvers import Method, SamplerConfig, fixed_gamma_theta, sample, step_noise, write_trajectory

__all__ = [
    "ErrorRow",
    "ErrorReport",
    "error_decomposition",
    "regenerate",
    "summarize",
    "ConfigError",
    "load_config",
    "run_experiment",
    "write_svg_plot",
]

log = logging.getLogger(__name__)

FIG2_GAMMAS = (0.0, 0.001, 0.005, 0.01)
FIG2_STEPS = (15, 20, 25, 30, 35, 40)
_REGEN_STREAM = 30


@dataclass(frozen=True)
class ErrorRow:
    method: str
    gamma: float
    n_steps: int
    gradient_error: float
    discretization_error: float
    total_error: float
    seed: int

    def __post_init__(self):
        for name in ("gradient_error", "discretization_error", "total_error"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class ErrorReport:
    rows: list[ErrorRow] = field(default_factory=list)

    FIELDS = ("method", "gamma", "n_steps", "gradient_error", "discretization_error", "total_error", "seed")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.rows:
            w.writerow([r.method, repr(r.gamma), r.n_steps, repr(r.gradient_error),
                        repr(r.discretization_error), repr(r.total_error), r.seed])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "ErrorReport":
        rows = []
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rows.append(ErrorRow(d["method"], float(d["gamma"]), int(d["n_steps"]),
                                     float(d["gradient_error"]), float(d["discretization_error"]),
                                     float(d["total_error"]), int(d["seed"])))
        return cls(rows)

    def extend(self, other: "ErrorReport") -> None:
        self.rows.extend(other.rows)


def _tail_schedule(scheme, n_steps: int, t_mid: float, sigma_min: float, partial_fraction: float) -> TimeSchedule:
    n_tail = max(1, int(round(partial_fraction * n_steps)))
    return build_schedule(scheme, n_tail, sigma_max=t_mid, sigma_min=sigma_min)


def regenerate(field, source: PointCloud, *, method: str, host, gamma: float, scheme, n_steps: int,
               t_mid: float = 0.8, partial_fraction: float = 1 / 3, sigma_min: float = 0.002,
               seed: int = 0) -> np.ndarray:
    """Perturb ``source`` to ``t_mid`` and denoise it with the tail of the sampler."""
    tail = _tail_schedule(scheme, n_steps, t_mid, sigma_min, partial_fraction)
    eps = step_noise(seed, 0, len(source), stream=_REGEN_STREAM)
    x_mid = source.points + t_mid * eps
    cfg = _sampler_config(tail, method, host, gamma, seed + 1_000_003)
    return sample(cfg, field, x_init=x_mid, record=False).final


def _sampler_config(schedule, method, host, gamma, seed, afs=False) -> SamplerConfig:
    method = Method(method)
    if method in (Method.EULER, Method.HEUN, Method.DPM2):
        if gamma == 0:
            return SamplerConfig(schedule, method, seed=seed, afs=afs)
        # Fixed-gamma SDE variant of a baseline solver.
        method, host = Method.PLUGIN, method
    theta = fixed_gamma_theta(schedule, gamma)
    return SamplerConfig(schedule, method, host, theta, afs, seed)


def error_decomposition(
    field,
    oracle: MixtureScoreOracle,
    *,
    step_counts: Sequence[int] = FIG2_STEPS,
    gammas: Sequence[float] = FIG2_GAMMAS,
    method: str = "heun",
    host: str | None = None,
    scheme: str = "polynomial",
    t_mid: float = 0.8,
    partial_fraction: float = 1 / 3,
    n_eval: int = 20000,
    n_proj: int = 128,
    seed: int = 0,
) -> ErrorReport:
    """Total / gradient / discretization W1 for each step count and fixed gamma.

    Ground truth is drawn from ``oracle``; the reference set used in the
    distances and the set that seeds the regenerated run are independent.
    ``method`` is a baseline solver (with injection when gamma > 0) or
    ``adasde``/``plugin`` with neutral scale/shift and geometric midpoints.
    """
    if 0.0 not in [float(g) for g in gammas]:
        raise ValueError("gammas must include 0 (the ODE baseline)")
    reference = sample_oracle(oracle, n_eval, seed=_sub(seed, 1))
    source = sample_oracle(oracle, n_eval, seed=_sub(seed, 2))
    w1_seed = _sub(seed, 3)
    label = method if host is None else f"{method}:{host}"
    report = ErrorReport()
    for n in step_counts:
        sched = build_schedule(scheme, n)
        for g in gammas:
            gen = sample(_sampler_config(sched, method, host, g, seed), field, n_points=n_eval, record=False).final
            regen = regenerate(field, source, method=method, host=host, gamma=g, scheme=scheme, n_steps=n,
                               t_mid=t_mid, partial_fraction=partial_fraction,
                               sigma_min=float(sched.levels[-1]), seed=seed)
            report.rows.append(ErrorRow(
                label, float(g), int(n),
                gradient_error=sliced_w1(gen, regen, n_proj, w1_seed),
                discretization_error=sliced_w1(regen, reference, n_proj, w1_seed),
                total_error=sliced_w1(gen, reference, n_proj, w1_seed),
                seed=seed,
            ))
            log.info("steps=%d gamma=%g %s", n, g, report.rows[-1])
    return report


def _sub(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def summarize(report: ErrorReport) -> list[dict]:
    """Per-gamma means over steps and seeds."""
    out = []
    for g in sorted({r.gamma for r in report.rows}):
        rows = [r for r in report.rows if r.gamma == g]
        out.append({
            "gamma": g,
            "gradient_error": float(np.mean([r.gradient_error for r in rows])),
            "discretization_error": float(np.mean([r.discretization_error for r in rows])),
            "total_error": float(np.mean([r.total_error for r in rows])),
            "n_rows": len(rows),
        })
    return out


# --------------------------------------------------------------------------
# SVG output (polylines only)

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def write_svg_plot(path, series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                   width: int = 480, height: int = 320) -> None:
    pad = 40
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#999"/>',
        f'<text x="{pad}" y="{height - 10}" font-size="10">{x0:g}</text>',
        f'<text x="{width - pad}" y="{height - 10}" font-size="10" text-anchor="end">{x1:g}</text>',
        f'<text x="4" y="{height - pad}" font-size="10">{y0:.4g}</text>',
        f'<text x="4" y="{pad + 4}" font-size="10">{y1:.4g}</text>',
    ]
    for k, (name, (xv, yv)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xv, yv))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 14 + 12 * k}" font-size="10" fill="{color}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _report_plots(report: ErrorReport, out_dir: Path) -> None:
    for metric in ("gradient_error", "discretization_error", "total_error"):
        series = {}
        for g in sorted({r.gamma for r in report.rows}):
            by_n: dict[int, list[float]] = {}
            for r in report.rows:
                if r.gamma == g:
                    by_n.setdefault(r.n_steps, []).append(getattr(r, metric))
            ns = sorted(by_n)
            series[f"gamma={g:g}"] = (ns, [float(np.mean(by_n[n])) for n in ns])
        write_svg_plot(out_dir / f"{metric}.svg", series, title=metric.replace("_", " "))


# --------------------------------------------------------------------------
# Config-driven pipelines


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "seed": int,
    "data": {"n_points": int, "r_outer": float, "r_inner": float, "noise_sigma": float},
    "field": {"kind": str, "checkpoint": str, "oracle_centers": int},
    "train": {k: type(v) for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "sample": {"method": str, "host": str, "scheme": str, "n_steps": int, "n_points": int,
               "afs": bool, "gamma": float, "theta": str, "record": bool},
    "distill": {"n_steps": int, "scheme": str, "m": int, "teacher_method": str, "host": str,
                "learning_rate": float, "n_rounds": int, "batch_size": int, "inner_iters": int,
                "gamma_min": float, "gamma_max": float, "fd_rel": float, "afs": bool,
                "eval_points": int, "w1_points": int},
    "decompose": {"step_counts": list, "gammas": list, "method": str, "host": str, "scheme": str,
                  "t_mid": float, "partial_fraction": float, "n_eval": int, "n_proj": int},
    "sweep": {"seeds": list, "retrain": bool},
}

DEFAULTS = {
    "seed": 0,
    "data": {"n_points": 20000, "r_outer": 0.8, "r_inner": 0.6, "noise_sigma": 0.1},
    "field": {"kind": "mlp", "oracle_centers": 2048},
    "train": {},
    "sample": {"method": "euler", "scheme": "polynomial", "n_steps": 5, "n_points": 4096,
               "afs": False, "gamma": 0.0, "record": False},
    "distill": {"eval_points": 2000, "w1_points": 1024},
    "decompose": {"step_counts": list(FIG2_STEPS), "gammas": list(FIG2_GAMMAS), "method": "heun",
                  "scheme": "polynomial", "t_mid": 0.8, "partial_fraction": 1 / 3, "n_eval": 20000,
                  "n_proj": 128},
    "sweep": {"seeds": [0, 1, 2], "retrain": True},
}


def _check(cfg: dict, schema: dict, path: str = "") -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    for key, value in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        expected = schema[key]
        if isinstance(expected, dict):
            _check(value, expected, where)
        elif expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
        elif not isinstance(value, expected):
            raise ConfigError(f"{where}: expected {expected.__name__}, got {value!r}")


def _merge(base: dict, over: dict) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in over.items():
        out[k] = _merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def load_config(source=None, **overrides) -> dict:
    """Read a YAML/JSON config file (or mapping), validate it, fill defaults."""
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
    _check(raw, _SCHEMA)
    cfg = _merge(DEFAULTS, raw)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    _check(cfg, _SCHEMA)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _versions() -> dict:
    import scipy

    return {"adasde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class _Run:
    """Shared state of one pipeline invocation (data, field, output dir)."""

    def __init__(self, cfg: dict, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self._field = None

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def data_kwargs(self, seed=None) -> dict:
        d = self.cfg["data"]
        return dict(n_points=d["n_points"], r_outer=d["r_outer"], r_inner=d["r_inner"],
                    noise_sigma=d["noise_sigma"], seed=self.seed if seed is None else seed)

    def data(self) -> PointCloud:
        return make_double_circle(**self.data_kwargs())

    def oracle(self) -> MixtureScoreOracle:
        return double_circle_oracle(**self.data_kwargs())

    def record(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def field(self, train_if_missing: bool = True):
        if self._field is not None:
            return self._field
        fcfg = self.cfg["field"]
        if fcfg["kind"] == "oracle":
            self._field = self.oracle().subsample(fcfg["oracle_centers"], seed=self.seed)
        elif fcfg["kind"] == "mlp":
            ckpt = fcfg.get("checkpoint")
            if ckpt:
                if not Path(ckpt).exists():
                    raise ConfigError(f"field.checkpoint: file not found: {ckpt}")
                self._field = MlpField(load_params(ckpt))
            elif train_if_missing:
                self._field = MlpField(self.train())
            else:
                raise ConfigError("field.checkpoint is required")
        else:
            raise ConfigError(f"field.kind: expected 'oracle' or 'mlp', got {fcfg['kind']!r}")
        return self._field

    def train(self):
        tcfg = TrainConfig(**self.cfg["train"], seed=self.seed)
        result = train(tcfg, self.data(), loss_csv=self.record("loss_curve.csv"))
        save_params(self.record("checkpoint.csv"), result.params)
        return result.params

    def sample(self):
        s = self.cfg["sample"]
        sched = build_schedule(s["scheme"], s["n_steps"])
        save_schedule(self.record("schedule.txt"), sched)
        if s.get("theta"):
            table = load_theta_table(s["theta"])
            method = Method(s["method"])
            cfg = SamplerConfig(sched, method, s.get("host"), table.steps, s["afs"], self.seed)
        else:
            cfg = _sampler_config(sched, s["method"], s.get("host"), s["gamma"], self.seed, s["afs"])
        traj = sample(cfg, self.field(), n_points=s["n_points"], record=s["record"])
        if s["record"]:
            write_trajectory(self.out / "trajectory", traj)
            self.outputs.append("trajectory/")
        save_points_csv(self.record("samples.csv"), traj.final)
        ref = sample_oracle(self.oracle(), s["n_points"], seed=_sub(self.seed, 11))
        _write_rows(self.record("sample_metrics.csv"), ["method", "n_steps", "nfe", "sliced_w1"],
                    [[cfg.method.value, s["n_steps"], traj.nfe, repr(sliced_w1(traj.final, ref))]])
        return traj

    def distill(self):
        d = dict(self.cfg["distill"])
        eval_points = d.pop("eval_points")
        w1_points = d.pop("w1_points")
        dcfg = DistillConfig(**d, seed=self.seed)
        field = self.field()
        table = optimize_theta(field, dcfg)
        save_theta_table(self.out / "theta", table)
        self.outputs.append("theta/")
        neutral = _neutral_table(dcfg)
        mse0 = endpoint_mse(field, dcfg, neutral, eval_points, seed=_sub(self.seed, 21))
        mse1 = endpoint_mse(field, dcfg, table, eval_points, seed=_sub(self.seed, 21))
        w1 = distilled_vs_baseline_w1(field, self.oracle(), dcfg, table, w1_points, seed=_sub(self.seed, 22))
        _write_rows(self.record("distill_metrics.csv"),
                    ["endpoint_mse_neutral", "endpoint_mse_distilled", "w1_adasde", "w1_dpm2", "nfe"],
                    [[repr(mse0), repr(mse1), repr(w1["adasde"]), repr(w1["dpm2"]), w1["nfe"]]])
        return table

    def decompose(self, seed=None, field=None) -> ErrorReport:
        d = self.cfg["decompose"]
        return error_decomposition(
            field or self.field(), self.oracle(),
            step_counts=d["step_counts"], gammas=d["gammas"], method=d["method"], host=d.get("host"),
            scheme=d["scheme"], t_mid=d["t_mid"], partial_fraction=d["partial_fraction"],
            n_eval=d["n_eval"], n_proj=d["n_proj"], seed=self.seed if seed is None else seed,
        )

    def write_manifest(self, command: str) -> None:
        manifest = {
            "command": command,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "versions": _versions(),
            "outputs": sorted(self.outputs),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _neutral_table(dcfg: DistillConfig):
    from .distill import ThetaTable
    from .solvers import neutral_theta

    return ThetaTable(neutral_theta(dcfg.student_schedule()))


def distilled_vs_baseline_w1(field, oracle, dcfg: DistillConfig, table, n: int, seed: int) -> dict:
    """Exact W1 to held-out ground truth: distilled AdaSDE vs plain DPM-Solver-2 on the same schedule."""
    sched = dcfg.student_schedule()
    held_out = sample_oracle(oracle, n, seed=seed)
    method = Method.ADASDE if dcfg.host is Method.DPM2 else Method.PLUGIN
    host = None if method is Method.ADASDE else dcfg.host
    ada = sample(SamplerConfig(sched, method, host, table.steps, dcfg.afs, seed), field, n_points=n, record=False)
    base = sample(SamplerConfig(sched, Method.DPM2, afs=dcfg.afs, seed=seed), field, n_points=n, record=False)
    return {"adasde": exact_w1_small(ada.final, held_out), "dpm2": exact_w1_small(base.final, held_out),
            "nfe": ada.nfe, "nfe_dpm2": base.nfe}


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(command: str, config=None, out_dir="out", seed: int | None = None) -> Path:
    """Run one pipeline (``train``/``distill``/``sample``/``decompose``/``sweep``) and write artifacts."""
    cfg = load_config(config, seed=seed)
    run = _Run(cfg, Path(out_dir))
    if command == "train":
        run.train()
    elif command == "sample":
        run.sample()
    elif command == "distill":
        run.distill()
    elif command == "decompose":
        report = run.decompose()
        report.write_csv(run.record("error_report.csv"))
        _report_plots(report, run.out)
        run.outputs += ["gradient_error.svg", "discretization_error.svg", "total_error.svg"]
    elif command == "sweep":
        report = _sweep(run)
        report.write_csv(run.record("error_report.csv"))
        _write_summary(run.record("error_summary.csv"), summarize(report))
        _report_plots(report, run.out)
        run.outputs += ["gradient_error.svg", "discretization_error.svg", "total_error.svg"]
    else:
        raise ConfigError(f"unknown command {command!r}")
    run.write_manifest(command)
    return run.out


def _sweep(run: _Run) -> ErrorReport:
    """Decomposition over several seeds, each against its own data and ground truth.

    With ``retrain`` (and no checkpoint) every seed trains its own model.
    """
    report = ErrorReport()
    sw = run.cfg["sweep"]
    for s in sw["seeds"]:
        sub = _Run(_merge(run.cfg, {"seed": s}), run.out / f"seed_{s}")
        fcfg = run.cfg["field"]
        shared = fcfg["kind"] == "mlp" and (fcfg.get("checkpoint") or not sw["retrain"])
        field = run.field() if shared else sub.field()
        run.outputs += [f"seed_{s}/{name}" for name in sub.outputs]
        report.extend(sub.decompose(field=field))
    return report


def _write_summary(path, summary: list[dict]) -> None:
    _write_rows(path, ["gamma", "gradient_error", "discretization_error", "total_error", "n_rows"],
                [[repr(s["gamma"]), repr(s["gradient_error"]), repr(s["discretization_error"]),
                  repr(s["total_error"]), s["n_rows"]] for s in summary])
