"""Circles-crossed (CC) and count-circles-crossed (C3) stability scores.

For each consecutive pair of detected marker centers, concentric circles are
drawn around the earlier center and the later center's displacement is
counted against their radii. Each count is weighted by the ratio of the
current robot-to-marker distance to the trial's maximum distance, and the
weighted counts are summed over a window.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ConfigError, DataError, DataFrame, MarkerObservation, RunLog, fmt_float


@dataclass(frozen=True)
class C3Config:
    n_circles: int = 20
    r_min: float = 2.0
    r_max: float = 40.0
    tie_counts_as_crossed: bool = False

    def __post_init__(self):
        if int(self.n_circles) != self.n_circles or self.n_circles < 1:
            raise ConfigError(f"n_circles must be a positive integer, got {self.n_circles!r}")
        if not (0 < self.r_min <= self.r_max) or not math.isfinite(self.r_max):
            raise ConfigError(f"need 0 < r_min <= r_max, got {self.r_min!r}, {self.r_max!r}")
        if self.n_circles == 1 and self.r_min != self.r_max:
            raise ConfigError("a single circle needs r_min == r_max")

    def to_dict(self) -> dict:
        return {"n_circles": self.n_circles, "r_min": self.r_min, "r_max": self.r_max,
                "tie_counts_as_crossed": self.tie_counts_as_crossed}

    @classmethod
    def from_dict(cls, d: dict) -> "C3Config":
        return cls(**d)


@dataclass(frozen=True, slots=True)
class DistanceContext:
    d_aruco: float
    d_max: float

    @property
    def factor(self) -> float:
        if not self.d_max > 0:
            raise DataError(f"d_max must be positive, got {self.d_max!r}")
        if not self.d_aruco > 0:
            raise DataError(f"d_aruco must be positive, got {self.d_aruco!r}")
        return min(self.d_aruco, self.d_max) / self.d_max


def circle_radii(cfg: C3Config) -> np.ndarray:
    """Linearly spaced radii ``r_min .. r_max`` (pixels)."""
    if cfg.n_circles == 1:
        return np.array([float(cfg.r_min)])
    step = (cfg.r_max - cfg.r_min) / (cfg.n_circles - 1)
    return cfg.r_min + np.arange(cfg.n_circles) * step


def _count(radii: np.ndarray, d, ties: bool):
    # radii sorted ascending: searchsorted gives |{r < d}| (left) or |{r <= d}| (right)
    return np.searchsorted(radii, d, side="right" if ties else "left")


def cc_score(prev_center: Sequence[float], cur_center: Sequence[float],
             cfg: C3Config = C3Config()) -> int:
    """Number of circles around ``prev_center`` that ``cur_center`` has jumped past."""
    du = float(cur_center[0]) - float(prev_center[0])
    dv = float(cur_center[1]) - float(prev_center[1])
    if not (math.isfinite(du) and math.isfinite(dv)):
        raise DataError("marker centers must be finite")
    return int(_count(circle_radii(cfg), math.hypot(du, dv), cfg.tie_counts_as_crossed))


def cc_scores(centers: np.ndarray, cfg: C3Config = C3Config()) -> np.ndarray:
    """Vectorised CC for every consecutive pair in an (N, 2) center array."""
    centers = np.asarray(centers, dtype=float)
    if not np.all(np.isfinite(centers)):
        raise DataError("marker centers must be finite")
    if len(centers) < 2:
        return np.zeros(0, dtype=np.int64)
    step = np.diff(centers, axis=0)
    d = np.hypot(step[:, 0], step[:, 1])
    return _count(circle_radii(cfg), d, cfg.tie_counts_as_crossed).astype(np.int64)


def normalized_cc(cc: int, ctx: DistanceContext) -> float:
    return cc * ctx.factor


def c3_score(frames: Sequence[MarkerObservation], distances: Sequence[DistanceContext],
             cfg: C3Config = C3Config()) -> float:
    """Sum of distance-weighted CC over consecutive frame pairs.

    The weight of pair ``(i-1, i)`` uses ``distances[i]`` (the later frame).
    """
    if len(frames) != len(distances):
        raise DataError(f"{len(frames)} frames but {len(distances)} distance contexts")
    if len(frames) < 2:
        return 0.0
    centers = np.array([f.center for f in frames])
    ccs = cc_scores(centers, cfg)
    total = 0.0
    for cc, ctx in zip(ccs, distances[1:]):
        total += normalized_cc(int(cc), ctx)
    return total


def c3_from_arrays(centers: np.ndarray, d_aruco: np.ndarray, d_max: float,
                   cfg: C3Config = C3Config()) -> float:
    """Array form of :func:`c3_score` used by the batch scorer."""
    if len(centers) != len(d_aruco):
        raise DataError(f"{len(centers)} centers but {len(d_aruco)} distances")
    if not d_max > 0:
        raise DataError(f"d_max must be positive, got {d_max!r}")
    if len(centers) < 2:
        return 0.0
    factors = np.minimum(d_aruco[1:], d_max) / d_max
    total = 0.0
    # sequential sum keeps agreement with c3_score bit-for-bit
    for cc, f in zip(cc_scores(centers, cfg), factors):
        total += int(cc) * float(f)
    return total


def normalize_gt(c3: float, c3_max: float) -> float:
    """Scale a raw C3 into [0, 1]; unseen values above ``c3_max`` clamp to 1."""
    if not c3_max > 0:
        raise DataError(f"c3_max must be positive, got {c3_max!r}")
    if not c3 >= 0:
        raise DataError(f"c3 must be non-negative, got {c3!r}")
    return min(max(c3 / c3_max, 0.0), 1.0)


# ---------------------------------------------------------------------------
# per-trial scoring


@dataclass(frozen=True, slots=True)
class WindowScore:
    index: int
    t_start: float
    t_end: float
    n_frames: int
    c3_raw: float
    flagged: bool


def marker_distances(log: RunLog, t: np.ndarray) -> tuple[np.ndarray, float]:
    """Robot-to-marker distance at times ``t`` and the trial's maximum distance.

    Position is linearly interpolated from GPS (clamped at the ends); the
    maximum is taken over the GPS fixes, which bounds every interpolated
    distance from above.
    """
    gps = log.gps
    if len(gps) == 0:
        raise DataError(f"trial {log.meta.trial_id}: no GPS fixes")
    mx, my = log.marker_position
    fix_d = np.hypot(gps[:, 1] - mx, gps[:, 2] - my)
    d_max = float(fix_d.max())
    x = np.interp(t, gps[:, 0], gps[:, 1])
    y = np.interp(t, gps[:, 0], gps[:, 2])
    return np.hypot(x - mx, y - my), d_max


def score_windows(log: RunLog, windows: Sequence[DataFrame],
                  cfg: C3Config = C3Config()) -> list[WindowScore]:
    """Raw C3 for each window from the detected marker frames it spans.

    Windows with fewer than two detected frames score 0 and are flagged.
    """
    t_det, centers = log.detected_markers()
    if len(t_det):
        d_aruco, d_max = marker_distances(log, t_det)
    else:
        d_aruco, d_max = np.zeros(0), 1.0
    out = []
    for i, w in enumerate(windows):
        lo = np.searchsorted(t_det, w.t_start, side="left")
        hi = np.searchsorted(t_det, w.t_end, side="right")
        n = int(hi - lo)
        if n < 2:
            out.append(WindowScore(i, w.t_start, w.t_end, n, 0.0, True))
            continue
        c3 = c3_from_arrays(centers[lo:hi], d_aruco[lo:hi], d_max, cfg)
        out.append(WindowScore(i, w.t_start, w.t_end, n, c3, False))
    return out


SCORES_HEADER = ("window_index", "t_start", "t_end", "n_frames", "c3_raw", "flagged")


def write_scores_csv(scores: Sequence[WindowScore], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        for s in scores:
            w.writerow([s.index, fmt_float(s.t_start), fmt_float(s.t_end), s.n_frames,
                        fmt_float(s.c3_raw), int(s.flagged)])
    return path
