"""Vision-supervised stability scoring and proprioceptive stability regression."""

__version__ = "0.1.0"

from .c3score import C3Config, c3_score, cc_score, circle_radii, normalize_gt, score_windows
from .core import DataFrame, RunLog, ScoredWindow, TrialMeta, validate_runlog
from .estimator import StabilityRegressor
from .pipeline import SplitSpec, build_dataset, make_windows
from .simgen import SimConfig, TerrainProfile, generate_campaign, simulate_trial

__all__ = [
    "C3Config", "DataFrame", "RunLog", "ScoredWindow", "SimConfig", "SplitSpec",
    "StabilityRegressor", "TerrainProfile", "TrialMeta", "build_dataset", "c3_score",
    "cc_score", "circle_radii", "generate_campaign", "make_windows", "normalize_gt",
    "score_windows", "simulate_trial", "validate_runlog",
]
