"""Few-step diffusion sampling with learnable per-step stochastic coefficients."""

__version__ = "0.1.0"

from .schedule import Scheme, TimeSchedule, build_schedule, refine_schedule  # noqa: E402
from .dataset import MixtureScoreOracle, PointCloud, double_circle_oracle, make_double_circle  # noqa: E402
from .score_model import MlpField, TrainConfig, train  # noqa: E402
from .solvers import Method, SamplerConfig, StepParams, sample  # noqa: E402
from .distill import DistillConfig, ThetaTable, optimize_theta  # noqa: E402
from .metrics import exact_w1_small, sliced_w1, tv_grid  # noqa: E402

__all__ = [
    "__version__",
    "Scheme",
    "TimeSchedule",
    "build_schedule",
    "refine_schedule",
    "MixtureScoreOracle",
    "PointCloud",
    "double_circle_oracle",
    "make_double_circle",
    "MlpField",
    "TrainConfig",
    "train",
    "Method",
    "SamplerConfig",
    "StepParams",
    "sample",
    "DistillConfig",
    "ThetaTable",
    "optimize_theta",
    "exact_w1_small",
    "sliced_w1",
    "tv_grid",
]
