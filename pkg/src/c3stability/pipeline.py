"""RunLogs to a balanced, labelled and split window dataset."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .c3score import C3Config, normalize_gt, score_windows
from .core import (CHANNEL_ORDER, WINDOW_LENGTH, ConfigError, DataError, DataFrame, GpsFix,
                   RunLog, ScoredWindow, VelocitySample, fmt_float, validate_runlog,
                   write_windows_jsonl)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.15
    n_bins: int = 10
    split_seed: int = 0

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got "
                              f"{self.validation_fraction!r}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be >= 2, got {self.n_bins!r}")


# ---------------------------------------------------------------------------
# velocity


def _velocity_arrays(t: np.ndarray, xy: np.ndarray) -> np.ndarray:
    if len(t) < 2:
        raise DataError("need at least 2 GPS fixes to derive velocity")
    dt = np.diff(t)
    if np.any(dt == 0):
        i = int(np.flatnonzero(dt == 0)[0])
        raise DataError(f"duplicate GPS timestamp at index {i + 1} (t={t[i + 1]!r})")
    if np.any(dt < 0):
        raise DataError("GPS fixes are not time-sorted")
    v = np.empty_like(xy)
    v[0] = (xy[1] - xy[0]) / dt[0]
    v[-1] = (xy[-1] - xy[-2]) / dt[-1]
    if len(t) > 2:
        v[1:-1] = (xy[2:] - xy[:-2]) / (t[2:] - t[:-2])[:, None]
    return v


def derive_velocity(gps: Sequence[GpsFix] | np.ndarray) -> list[VelocitySample]:
    """Planar velocity: central differences inside, one-sided at the ends."""
    arr = _as_array(gps, 3)
    v = _velocity_arrays(arr[:, 0], arr[:, 1:3])
    return [VelocitySample(float(t), float(vx), float(vy))
            for t, (vx, vy) in zip(arr[:, 0], v)]


def _as_array(samples, ncols: int) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    return np.array([[getattr(s, f) for f in s.__slots__] for s in samples],
                    dtype=float).reshape(-1, ncols)


def _interp_arrays(t: np.ndarray, values: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(t) == 0:
        raise DataError("cannot interpolate from an empty series")
    out = np.column_stack([np.interp(query, t, values[:, j]) for j in range(values.shape[1])])
    outside = (query < t[0]) | (query > t[-1])
    return out, outside


def interpolate_to(samples: Sequence[VelocitySample] | np.ndarray,
                   query_ts: Sequence[float]) -> tuple[list[VelocitySample], np.ndarray]:
    """Linear per-channel interpolation at ``query_ts``.

    Queries outside the sample span clamp to the nearest end; the second
    return value flags them.
    """
    arr = _as_array(samples, 3)
    q = np.asarray(query_ts, dtype=float)
    vals, outside = _interp_arrays(arr[:, 0], arr[:, 1:3], q)
    return [VelocitySample(float(t), float(a), float(b)) for t, (a, b) in zip(q, vals)], outside


# ---------------------------------------------------------------------------
# windows


def make_windows(run: RunLog) -> list[DataFrame]:
    """Non-overlapping 200-sample IMU blocks with GPS velocity at IMU times."""
    n = len(run.imu)
    if n < WINDOW_LENGTH:
        log.warning("trial %s has %d IMU samples (< %d); no windows",
                    run.meta.trial_id, n, WINDOW_LENGTH)
        return []
    vel = _velocity_arrays(run.gps[:, 0], run.gps[:, 1:3])
    out = []
    for k in range(n // WINDOW_LENGTH):
        block = run.imu[k * WINDOW_LENGTH:(k + 1) * WINDOW_LENGTH]
        t = block[:, 0]
        v, _ = _interp_arrays(run.gps[:, 0], vel, t)
        channels = np.vstack([block[:, 1:].T, v.T])
        out.append(DataFrame(channels, float(t[0]), float(t[-1])))
    return out


def mean_speed(frame: DataFrame) -> float:
    vx, vy = frame.channels[6], frame.channels[7]
    return float(np.mean(np.hypot(vx, vy)))


def prune_outliers(windows: Sequence[ScoredWindow], min_mean_speed: float = 0.1
                   ) -> tuple[list[ScoredWindow], list[tuple[ScoredWindow, float]]]:
    """Drop windows whose mean planar speed is below ``min_mean_speed``.

    Returns the kept windows and an audit list of ``(window, mean_speed)``.
    """
    kept, removed = [], []
    for w in windows:
        s = mean_speed(w.frame)
        if s < min_mean_speed:
            removed.append((w, s))
        else:
            kept.append(w)
    return kept, removed


def balance_classes(windows: Sequence[ScoredWindow], seed: int = 0) -> list[ScoredWindow]:
    """Subsample each speed level within a terrain down to that terrain's smallest level.

    Every terrain must contain every speed level seen anywhere in the input.
    Selection is uniform and seeded; surviving windows keep input order.
    """
    groups: dict[tuple[str, float], list[int]] = defaultdict(list)
    for i, w in enumerate(windows):
        groups[w.meta.class_key].append(i)
    terrains = sorted({k[0] for k in groups})
    speeds = sorted({k[1] for k in groups})
    for terrain in terrains:
        for speed in speeds:
            if not groups.get((terrain, speed)):
                raise ConfigError(f"class {terrain}_{speed:g} has no windows")
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for terrain in terrains:
        target = min(len(groups[(terrain, s)]) for s in speeds)
        for speed in speeds:
            idx = groups[(terrain, speed)]
            chosen = rng.choice(len(idx), size=target, replace=False)
            keep.update(idx[j] for j in chosen)
    return [w for i, w in enumerate(windows) if i in keep]


def gt_bin(gt: float, n_bins: int) -> int:
    return min(int(gt * n_bins), n_bins - 1)


def _allocate(counts: dict[int, int], fraction: float, rng: np.random.Generator) -> dict[int, int]:
    """Per-bin validation counts.

    Every non-empty bin gets at least one window and otherwise the floor or
    ceiling of its share; leftover units go to the largest remainders (ties
    in random order) until the rounded overall target is met.
    """
    total = sum(counts.values())
    target = math.floor(fraction * total + 0.5)
    quota = {b: fraction * n for b, n in counts.items()}
    alloc = {b: max(1, math.floor(q)) for b, q in quota.items()}
    left = target - sum(alloc.values())
    if left > 0:
        bins = sorted(counts)
        tiebreak = rng.permutation(len(bins))
        order = sorted(range(len(bins)),
                       key=lambda j: (-(quota[bins[j]] - math.floor(quota[bins[j]])), tiebreak[j]))
        for j in order:
            if left == 0:
                break
            b = bins[j]
            if alloc[b] < counts[b] and quota[b] > alloc[b]:
                alloc[b] += 1
                left -= 1
    return alloc


def stratified_split(windows: Sequence[ScoredWindow], spec: SplitSpec = SplitSpec()
                     ) -> tuple[list[ScoredWindow], list[ScoredWindow]]:
    """Seeded train/validation split that keeps the GT histogram in both parts."""
    bins: dict[int, list[int]] = defaultdict(list)
    for i, w in enumerate(windows):
        if w.gt is None:
            raise DataError(f"window {w.window_id} has no GT label")
        bins[gt_bin(w.gt, spec.n_bins)].append(i)
    rng = np.random.default_rng(spec.split_seed)
    alloc = _allocate({b: len(v) for b, v in bins.items()}, spec.validation_fraction, rng)
    val: set[int] = set()
    for b in sorted(bins):
        members = bins[b]
        chosen = rng.choice(len(members), size=alloc[b], replace=False)
        val.update(members[j] for j in chosen)
    train = [w for i, w in enumerate(windows) if i not in val]
    validation = [w for i, w in enumerate(windows) if i in val]
    return train, validation


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class DatasetManifest:
    c3_max: float
    channel_order: list[str]
    window_length: int
    class_counts: dict[str, int]
    class_counts_before_balance: dict[str, int]
    split: dict[str, str]
    n_train: int
    n_validation: int
    n_test: int
    holdout_terrain: str | None
    config_hashes: dict[str, str]
    files: dict[str, str] = field(default_factory=dict)
    c3_max_fallback: bool = False

    def __post_init__(self):
        if not self.c3_max > 0:
            raise DataError(f"c3_max must be positive, got {self.c3_max!r}")
        if sum(self.class_counts.values()) != len(self.split):
            raise DataError("class counts do not sum to the dataset size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        # the CLI adds a provenance block next to the manifest fields
        return cls(**{k: v for k, v in d.items() if k != "provenance"})


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def score_trial(run: RunLog, cfg: C3Config = C3Config()) -> list[ScoredWindow]:
    """Window one trial and attach raw C3 (no GT yet)."""
    frames = make_windows(run)
    scores = score_windows(run, frames, cfg)
    return [ScoredWindow(frame=f, c3_raw=s.c3_raw, meta=run.meta, index=s.index,
                         flagged=s.flagged)
            for f, s in zip(frames, scores)]


@dataclass
class BuiltDataset:
    train: list[ScoredWindow]
    validation: list[ScoredWindow]
    test: list[ScoredWindow]
    pruned: list[tuple[ScoredWindow, float]]
    manifest: DatasetManifest


def build_dataset(logs: Sequence[RunLog], cfg: C3Config = C3Config(),
                  spec: SplitSpec = SplitSpec(), holdout_terrain: str | None = None,
                  min_mean_speed: float = 0.1, balance_seed: int | None = None,
                  out_dir: str | Path | None = None) -> BuiltDataset:
    """Window, score, prune, balance, label and split a campaign.

    Windows from ``holdout_terrain`` bypass balancing and splitting and form
    the test set. ``c3_max`` is the largest raw C3 among the windows kept for
    train + validation, so no label information flows from the test terrain.
    """
    scored: list[ScoredWindow] = []
    for run in logs:
        problems = validate_runlog(run)
        if problems:
            raise DataError(f"trial {run.meta.trial_id}: " + "; ".join(map(str, problems[:5])))
        try:
            scored.extend(score_trial(run, cfg))
        except DataError as exc:
            raise DataError(f"trial {run.meta.trial_id}: {exc}") from exc

    kept, pruned = prune_outliers(scored, min_mean_speed)
    pool = [w for w in kept if w.meta.terrain != holdout_terrain]
    test = [w for w in kept if w.meta.terrain == holdout_terrain]
    before = Counter(w.meta.class_label for w in pool)
    balanced = balance_classes(pool, spec.split_seed if balance_seed is None else balance_seed)

    c3_max = max((w.c3_raw for w in balanced), default=0.0)
    fallback = not c3_max > 0
    if fallback:
        log.warning("all training C3 scores are zero; using c3_max = 1.0")
        c3_max = 1.0
    balanced = [replace(w, gt=normalize_gt(w.c3_raw, c3_max)) for w in balanced]
    test = [replace(w, gt=normalize_gt(w.c3_raw, c3_max)) for w in test]

    train, validation = stratified_split(balanced, spec)
    split = {w.window_id: "train" for w in train}
    split.update({w.window_id: "validation" for w in validation})
    manifest = DatasetManifest(
        c3_max=c3_max,
        channel_order=list(CHANNEL_ORDER),
        window_length=WINDOW_LENGTH,
        class_counts=dict(sorted(Counter(w.meta.class_label for w in balanced).items())),
        class_counts_before_balance=dict(sorted(before.items())),
        split={w.window_id: split[w.window_id] for w in balanced},
        n_train=len(train),
        n_validation=len(validation),
        n_test=len(test),
        holdout_terrain=holdout_terrain,
        config_hashes={"c3": config_hash(cfg.to_dict()), "split": config_hash(asdict(spec)),
                       "min_mean_speed": config_hash(min_mean_speed)},
        c3_max_fallback=fallback,
    )
    built = BuiltDataset(train, validation, test, pruned, manifest)
    if out_dir is not None:
        write_dataset(built, out_dir)
    return built


def write_dataset(built: BuiltDataset, out_dir: str | Path) -> dict[str, Path]:
    """``dataset.jsonl``, ``test_<terrain>.jsonl``, ``pruned.csv``, ``manifest.json``."""
    from .simgen import file_sha256

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    labelled = built.train + built.validation
    order = sorted(labelled, key=lambda w: (w.meta.trial_id, w.index))
    extra = {w.window_id: {"split": built.manifest.split[w.window_id]} for w in order}
    paths["dataset"] = write_windows_jsonl(order, out / "dataset.jsonl", extra)
    if built.manifest.holdout_terrain is not None:
        name = f"test_{built.manifest.holdout_terrain}.jsonl"
        paths["test"] = write_windows_jsonl(
            built.test, out / name, {w.window_id: {"split": "test"} for w in built.test})
    paths["pruned"] = out / "pruned.csv"
    with open(paths["pruned"], "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("window_id", "terrain", "speed", "t_start", "t_end", "mean_speed"))
        for w, s in built.pruned:
            wr.writerow((w.window_id, w.meta.terrain, f"{w.meta.commanded_speed:g}",
                         fmt_float(w.frame.t_start), fmt_float(w.frame.t_end), fmt_float(s)))
    built.manifest.files = {p.name: file_sha256(p) for p in paths.values()}
    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(json.dumps(built.manifest.to_dict(), indent=2, sort_keys=True)
                                 + "\n", encoding="utf-8")
    return paths


def read_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
