"""Small EDM-preconditioned MLP denoiser trained by denoising score matching.

The network is a plain numpy MLP with a fixed layout::

    [c_in(t) * x, fourier(log t)]  ->  H -> H -> H  ->  2

with SiLU activations. Gradients are computed by hand (layer-wise backprop),
so everything stays in float64 and is checked against finite differences.

Every drift source exposes the same two methods, ``score(x, t)`` and
``drift(x, t)``; solvers accept anything that has them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .dataset import PointCloud

__all__ = [
    "ScoreField",
    "ZeroField",
    "MlpArch",
    "MlpParams",
    "MlpField",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "preconditioning",
    "init_params",
    "forward",
    "dsm_loss_and_grad",
    "train",
    "save_params",
    "load_params",
]

log = logging.getLogger(__name__)


@runtime_checkable
class ScoreField(Protocol):
    def score(self, x: np.ndarray, t: float) -> np.ndarray: ...

    def drift(self, x: np.ndarray, t: float) -> np.ndarray: ...


class ZeroField:
    """Drift-free field; sampling with it only moves points by injected noise."""

    def score(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def drift(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# Architecture and parameters


@dataclass(frozen=True)
class MlpArch:
    hidden_width: int = 128
    n_layers: int = 3
    n_fourier: int = 16
    sigma_data: float = 0.5

    @property
    def in_dim(self) -> int:
        return 2 + self.n_fourier

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_width] * self.n_layers + [2]
        return list(zip(dims[:-1], dims[1:]))

    def frequencies(self) -> np.ndarray:
        # Fixed geometric frequencies for sin/cos features of log(t) / 4.
        return np.geomspace(1.0, 32.0, self.n_fourier // 2)


@dataclass
class MlpParams:
    arch: MlpArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def equals(self, other: "MlpParams") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def init_params(arch: MlpArch, seed: int = 0) -> MlpParams:
    """He-style init for hidden layers; the output layer starts at zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    shapes = arch.layer_shapes()
    for i, (fan_in, fan_out) in enumerate(shapes):
        if i == len(shapes) - 1:
            weights.append(np.zeros((fan_in, fan_out)))
        else:
            weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(arch, weights, biases)


def preconditioning(t, sigma_data: float):
    """EDM coefficients (c_skip, c_out, c_in) at noise level ``t``."""
    t = np.asarray(t, dtype=np.float64)
    total = t * t + sigma_data**2
    c_skip = sigma_data**2 / total
    c_out = t * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    return c_skip, c_out, c_in


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _embed(arch: MlpArch, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    _, _, c_in = preconditioning(t, arch.sigma_data)
    phase = (np.log(t) / 4.0)[:, None] * arch.frequencies()[None, :]
    return np.concatenate([c_in[:, None] * x, np.sin(phase), np.cos(phase)], axis=1)


def _net(params: MlpParams, h: np.ndarray, keep: bool = False):
    cache = []
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if keep:
            cache.append((h, z))
        h = _silu(z) if i < n - 1 else z
    return h, cache


def _broadcast_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if np.any(t <= 0):
        raise ValueError("noise level must be positive")
    return t


def forward(params: MlpParams, x, t) -> np.ndarray:
    """Denoised estimate D(x, t) = c_skip x + c_out net(c_in x, emb(t))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = _broadcast_t(t, len(x))
    c_skip, c_out, _ = preconditioning(t, params.arch.sigma_data)
    out, _ = _net(params, _embed(params.arch, x, t))
    return c_skip[:, None] * x + c_out[:, None] * out


class MlpField:
    """ScoreField adapter around trained ``MlpParams``."""

    def __init__(self, params: MlpParams):
        self.params = params

    def denoise(self, x, t):
        return forward(self.params, x, t)

    def score(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = float(t)
        return (forward(self.params, x, t) - x) / (t * t)

    def drift(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = float(t)
        return (x - forward(self.params, x, t)) / t


# --------------------------------------------------------------------------
# Denoising score matching


def edm_weight(t, sigma_data: float):
    return (t * t + sigma_data**2) / (t * sigma_data) ** 2


def _dsm_fixed(params: MlpParams, x0: np.ndarray, t: np.ndarray, noise: np.ndarray, need_grad: bool = True):
    """Loss and gradient for fixed noise levels and noise draws."""
    arch = params.arch
    n = len(x0)
    xt = x0 + t[:, None] * noise
    c_skip, c_out, _ = preconditioning(t, arch.sigma_data)
    out, cache = _net(params, _embed(arch, xt, t), keep=need_grad)
    denoised = c_skip[:, None] * xt + c_out[:, None] * out
    resid = denoised - x0
    w = edm_weight(t, arch.sigma_data)
    loss = float(np.sum(w[:, None] * resid**2) / (2 * n))
    if not need_grad:
        return loss, None

    grad_out = (w * c_out)[:, None] * resid / n
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    g = grad_out
    for i in reversed(range(len(params.weights))):
        h_in, z = cache[i]
        if i < len(params.weights) - 1:
            g = g * _silu_grad(z)
        gw[i] = h_in.T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ params.weights[i].T
    return loss, MlpParams(arch, gw, gb)


def sample_noise_levels(rng: np.random.Generator, n: int, sigma_data: float, log_std: float = 1.2, t_min=0.002, t_max=80.0):
    """Log-normal noise levels centred on 0.5 * sigma_data, clipped to the sampling range."""
    t = np.exp(math.log(0.5 * sigma_data) + log_std * rng.standard_normal(n))
    return np.clip(t, t_min, t_max)


def dsm_loss_and_grad(params: MlpParams, batch, rng: np.random.Generator, t=None, noise=None):
    """EDM-weighted denoising loss on ``batch`` and its exact gradient.

    Noise levels are drawn from ``rng`` unless ``t`` is given; likewise for
    the Gaussian draws. The loss is ``mean_i w(t_i) |D(x_i + t_i e_i) - x_i|^2 / 2``.
    """
    x0 = batch.points if isinstance(batch, PointCloud) else np.asarray(batch, dtype=np.float64)
    if len(x0) == 0:
        raise ValueError("empty batch")
    if t is None:
        t = sample_noise_levels(rng, len(x0), params.arch.sigma_data)
    t = _broadcast_t(t, len(x0))
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return _dsm_fixed(params, x0, t, noise)


# --------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    hidden_width: int = 128
    n_layers: int = 3
    n_fourier: int = 16
    sigma_data: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 512
    n_iters: int = 20000
    log_std: float = 1.2
    t_min: float = 0.002
    t_max: float = 80.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_width", "n_layers", "learning_rate", "batch_size", "sigma_data", "log_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.n_iters < 0:
            raise ValueError("TrainConfig.n_iters must be non-negative")

    @property
    def arch(self) -> MlpArch:
        return MlpArch(self.hidden_width, self.n_layers, self.n_fourier, self.sigma_data)


@dataclass
class TrainResult:
    params: MlpParams
    losses: list[float] = field(default_factory=list)

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loss"])
            for i, v in enumerate(self.losses):
                writer.writerow([i, repr(v)])


class TrainingDivergedError(RuntimeError):
    pass


def train(config: TrainConfig, data: PointCloud, loss_csv=None, log_every: int = 2000) -> TrainResult:
    """Adam on the DSM loss; deterministic given ``config.seed``."""
    params = init_params(config.arch, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    pts = data.points
    arrays = params.arrays()
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    losses: list[float] = []
    for it in range(config.n_iters):
        idx = rng.integers(len(pts), size=config.batch_size)
        t = sample_noise_levels(rng, config.batch_size, config.sigma_data, config.log_std, config.t_min, config.t_max)
        loss, grad = dsm_loss_and_grad(params, pts[idx], rng, t=t)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at iteration {it}")
        losses.append(loss)
        k = it + 1
        lr_t = config.learning_rate * math.sqrt(1 - config.beta2**k) / (1 - config.beta1**k)
        for a, g, mi, vi in zip(arrays, grad.arrays(), m, v):
            mi *= config.beta1
            mi += (1 - config.beta1) * g
            vi *= config.beta2
            vi += (1 - config.beta2) * g * g
            a -= lr_t * mi / (np.sqrt(vi) + config.adam_eps)
        if log_every and k % log_every == 0:
            log.info("iter %d  loss %.5f", k, float(np.mean(losses[-log_every:])))
    result = TrainResult(params, losses)
    if loss_csv is not None:
        result.write_loss_csv(loss_csv)
    return result


# --------------------------------------------------------------------------
# Checkpoints: a CSV file, architecture JSON in the header line, then one row
# per array as ``name,rows,cols,v0,v1,...``.

_HEADER = "# adasde-mlp "


def save_params(path, params: MlpParams) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_HEADER + json.dumps(asdict(params.arch), sort_keys=True) + "\n")
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            for name, a in ((f"W{i}", w), (f"b{i}", b.reshape(1, -1))):
                vals = ",".join(repr(v) for v in a.ravel().tolist())
                fh.write(f"{name},{a.shape[0]},{a.shape[1]},{vals}\n")


def load_params(path) -> MlpParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_HEADER):
        raise ValueError(f"{path}: missing architecture header")
    arch = MlpArch(**json.loads(lines[0][len(_HEADER):]))
    arrays = {}
    for line in lines[1:]:
        name, rows, cols, *vals = line.split(",")
        arrays[name] = np.array([float(v) for v in vals]).reshape(int(rows), int(cols))
    n = len(arch.layer_shapes())
    weights = [arrays[f"W{i}"] for i in range(n)]
    biases = [arrays[f"b{i}"].ravel() for i in range(n)]
    for w, shape in zip(weights, arch.layer_shapes()):
        if w.shape != shape:
            raise ValueError(f"{path}: weight shape {w.shape} does not match {shape}")
    return MlpParams(arch, weights, biases)
