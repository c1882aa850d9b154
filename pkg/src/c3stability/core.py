"""Typed data model for multi-rate trial logs and labelled windows.

Streams inside a :class:`RunLog` are stored as read-only numpy arrays so that
numerical stages can work on them directly; the per-sample dataclasses
(:class:`ImuSample`, :class:`GpsFix`, ...) are the row-level view used for
construction, CSV encoding and tests.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TERRAINS = ("pavement", "grass", "dirt", "dirt_rocks")
SPEEDS = (0.5, 1.0, 1.5)

IMU_CHANNELS = ("gyro_x", "gyro_y", "gyro_z", "accel_x", "accel_y", "accel_z")
VELOCITY_CHANNELS = ("vx", "vy")
CHANNEL_ORDER = IMU_CHANNELS + VELOCITY_CHANNELS
WINDOW_LENGTH = 200

IMU_HEADER = ("t", "gx", "gy", "gz", "ax", "ay", "az")
GPS_HEADER = ("t", "x", "y")
MARKER_HEADER = ("t", "u", "v", "detected")


class DataError(ValueError):
    """Input data violates a documented contract."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


def fmt_float(x: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(x))


# ---------------------------------------------------------------------------
# row-level types


@dataclass(frozen=True, slots=True)
class ImuSample:
    t: float
    gyro_x: float
    gyro_y: float
    gyro_z: float
    accel_x: float
    accel_y: float
    accel_z: float

    def to_row(self) -> list[str]:
        return [fmt_float(v) for v in self.values()]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "ImuSample":
        return cls(*(float(v) for v in row))

    def values(self) -> tuple[float, ...]:
        return (self.t, self.gyro_x, self.gyro_y, self.gyro_z,
                self.accel_x, self.accel_y, self.accel_z)


@dataclass(frozen=True, slots=True)
class GpsFix:
    t: float
    x: float
    y: float

    def to_row(self) -> list[str]:
        return [fmt_float(self.t), fmt_float(self.x), fmt_float(self.y)]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "GpsFix":
        return cls(float(row[0]), float(row[1]), float(row[2]))


@dataclass(frozen=True, slots=True)
class VelocitySample:
    t: float
    vx: float
    vy: float


@dataclass(frozen=True, slots=True)
class MarkerObservation:
    """Marker-center pixel coordinates for one camera frame.

    ``u`` and ``v`` are ``nan`` when ``detected`` is false and must not be read.
    """

    t: float
    u: float = math.nan
    v: float = math.nan
    detected: bool = False

    @property
    def center(self) -> tuple[float, float]:
        if not self.detected:
            raise DataError(f"marker not detected at t={self.t!r}")
        return (self.u, self.v)

    def to_row(self) -> list[str]:
        if self.detected:
            return [fmt_float(self.t), fmt_float(self.u), fmt_float(self.v), "1"]
        return [fmt_float(self.t), "", "", "0"]

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "MarkerObservation":
        if row[3] == "1":
            return cls(float(row[0]), float(row[1]), float(row[2]), True)
        return cls(float(row[0]))


@dataclass(frozen=True, slots=True)
class TrialMeta:
    terrain: str
    commanded_speed: float
    trial_id: str
    seed: int

    @property
    def class_key(self) -> tuple[str, float]:
        return (self.terrain, self.commanded_speed)

    @property
    def class_label(self) -> str:
        return f"{self.terrain}_{self.commanded_speed:g}"

    def to_dict(self) -> dict:
        return {"terrain": self.terrain, "commanded_speed": self.commanded_speed,
                "trial_id": self.trial_id, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrialMeta":
        return cls(str(d["terrain"]), float(d["commanded_speed"]),
                   str(d["trial_id"]), int(d["seed"]))


# ---------------------------------------------------------------------------
# trial log


def _frozen(a, ncols: int, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    if arr.size == 0:
        arr = arr.reshape(0, ncols) if ncols else arr.reshape(0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RunLog:
    """One trial: meta plus IMU (n, 7), GPS (m, 3) and marker (k, 3) streams.

    Column 0 of every stream is the timestamp. ``detected`` is a boolean
    vector aligned with ``marker``; undetected rows hold ``nan`` pixels.
    """

    meta: TrialMeta
    imu: np.ndarray
    gps: np.ndarray
    marker: np.ndarray
    detected: np.ndarray
    marker_position: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "imu", _frozen(self.imu, 7))
        object.__setattr__(self, "gps", _frozen(self.gps, 3))
        object.__setattr__(self, "marker", _frozen(self.marker, 3))
        object.__setattr__(self, "detected", _frozen(self.detected, 0, dtype=bool))
        object.__setattr__(self, "marker_position",
                           (float(self.marker_position[0]), float(self.marker_position[1])))
        if self.imu.ndim != 2 or self.imu.shape[1] != 7:
            raise DataError(f"imu stream must have 7 columns, got shape {self.imu.shape}")
        if self.gps.ndim != 2 or self.gps.shape[1] != 3:
            raise DataError(f"gps stream must have 3 columns, got shape {self.gps.shape}")
        if self.marker.ndim != 2 or self.marker.shape[1] != 3:
            raise DataError(f"marker stream must have 3 columns, got shape {self.marker.shape}")
        if self.detected.shape != (self.marker.shape[0],):
            raise DataError("detected flags must align with marker rows")

    @classmethod
    def from_samples(cls, meta: TrialMeta, imu: Iterable[ImuSample],
                     gps: Iterable[GpsFix], marker: Iterable[MarkerObservation],
                     marker_position: tuple[float, float]) -> "RunLog":
        marker = list(marker)
        return cls(
            meta=meta,
            imu=[s.values() for s in imu],
            gps=[(g.t, g.x, g.y) for g in gps],
            marker=[(m.t, m.u, m.v) if m.detected else (m.t, math.nan, math.nan)
                    for m in marker],
            detected=[m.detected for m in marker],
            marker_position=marker_position,
        )

    def imu_samples(self) -> list[ImuSample]:
        return [ImuSample(*map(float, row)) for row in self.imu]

    def gps_fixes(self) -> list[GpsFix]:
        return [GpsFix(*map(float, row)) for row in self.gps]

    def marker_observations(self) -> list[MarkerObservation]:
        return [MarkerObservation(float(t), float(u), float(v), True) if d
                else MarkerObservation(float(t))
                for (t, u, v), d in zip(self.marker, self.detected)]

    def detected_markers(self) -> tuple[np.ndarray, np.ndarray]:
        """Timestamps and (u, v) centers of the detected frames only."""
        m = self.marker[self.detected]
        return m[:, 0], m[:, 1:3]


@dataclass(frozen=True, slots=True)
class Violation:
    stream: str
    index: int
    rule: str

    def __str__(self) -> str:
        return f"{self.stream}[{self.index}]: {self.rule}"


def _time_violations(stream: str, t: np.ndarray) -> list[Violation]:
    out = []
    for i in np.flatnonzero(~np.isfinite(t)):
        out.append(Violation(stream, int(i), "timestamp not finite"))
    for i in np.flatnonzero(t < 0):
        out.append(Violation(stream, int(i), "timestamp negative"))
    if t.size > 1:
        for i in np.flatnonzero(~(np.diff(t) > 0)):
            out.append(Violation(stream, int(i) + 1, "timestamp not strictly increasing"))
    return out


def _finite_violations(stream: str, values: np.ndarray, names: Sequence[str],
                       rows: np.ndarray | None = None) -> list[Violation]:
    out = []
    bad_rows, bad_cols = np.nonzero(~np.isfinite(values))
    for i, j in zip(bad_rows, bad_cols):
        index = int(rows[i]) if rows is not None else int(i)
        out.append(Violation(f"{stream}.{names[j]}", index, "value not finite"))
    return out


def validate_runlog(log: RunLog) -> list[Violation]:
    """Check every RunLog invariant; an empty list means the log is well formed."""
    out: list[Violation] = []
    if log.meta.terrain not in TERRAINS:
        out.append(Violation("meta.terrain", 0, f"unknown terrain {log.meta.terrain!r}"))
    if log.meta.commanded_speed not in SPEEDS:
        out.append(Violation("meta.commanded_speed", 0,
                             f"speed {log.meta.commanded_speed!r} not in {SPEEDS}"))
    if not all(math.isfinite(c) for c in log.marker_position):
        out.append(Violation("marker_position", 0, "value not finite"))

    out += _time_violations("imu", log.imu[:, 0])
    out += _finite_violations("imu", log.imu[:, 1:], IMU_CHANNELS)
    out += _time_violations("gps", log.gps[:, 0])
    out += _finite_violations("gps", log.gps[:, 1:], ("x", "y"))
    out += _time_violations("marker", log.marker[:, 0])
    rows = np.flatnonzero(log.detected)
    out += _finite_violations("marker", log.marker[rows, 1:], ("u", "v"), rows)
    return out


# ---------------------------------------------------------------------------
# RunLog directory format


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path, header: Sequence[str]) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise DataError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def write_runlog(log: RunLog, directory: str | Path) -> Path:
    """Write ``meta.json``, ``imu.csv``, ``gps.csv`` and ``marker.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = log.meta.to_dict()
    meta["marker_position"] = list(log.marker_position)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    _write_csv(d / "imu.csv", IMU_HEADER,
               ([fmt_float(v) for v in row] for row in log.imu))
    _write_csv(d / "gps.csv", GPS_HEADER,
               ([fmt_float(v) for v in row] for row in log.gps))
    _write_csv(d / "marker.csv", MARKER_HEADER,
               (m.to_row() for m in log.marker_observations()))
    return d


def read_runlog(directory: str | Path) -> RunLog:
    d = Path(directory)
    try:
        meta_d = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        imu = [[float(v) for v in r] for r in _read_csv(d / "imu.csv", IMU_HEADER)]
        gps = [[float(v) for v in r] for r in _read_csv(d / "gps.csv", GPS_HEADER)]
        marker = [MarkerObservation.from_row(r)
                  for r in _read_csv(d / "marker.csv", MARKER_HEADER)]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read trial directory {d}: {exc}") from exc
    return RunLog(
        meta=TrialMeta.from_dict(meta_d),
        imu=imu,
        gps=gps,
        marker=[(m.t, m.u, m.v) for m in marker],
        detected=[m.detected for m in marker],
        marker_position=tuple(meta_d["marker_position"]),
    )


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class DataFrame:
    """An 8x200 model input; rows follow :data:`CHANNEL_ORDER`."""

    channels: np.ndarray
    t_start: float
    t_end: float

    def __post_init__(self):
        ch = np.array(self.channels, dtype=float)
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        if ch.shape != (len(CHANNEL_ORDER), WINDOW_LENGTH):
            raise DataError(f"dataframe must be 8x200, got {ch.shape}")
        if not np.all(np.isfinite(ch)):
            raise DataError("dataframe has non-finite entries")
        if not self.t_start < self.t_end:
            raise DataError("dataframe t_start must precede t_end")


@dataclass(frozen=True)
class ScoredWindow:
    """A dataframe with its raw C3, normalised label and provenance.

    ``gt`` stays ``None`` until the dataset-wide C3 maximum is known.
    """

    frame: DataFrame
    c3_raw: float
    meta: TrialMeta
    index: int
    gt: float | None = None
    flagged: bool = False

    def __post_init__(self):
        if not self.c3_raw >= 0:
            raise DataError(f"c3_raw must be >= 0, got {self.c3_raw!r}")
        if self.gt is not None and not 0.0 <= self.gt <= 1.0:
            raise DataError(f"gt must lie in [0, 1], got {self.gt!r}")

    @property
    def window_id(self) -> str:
        return f"{self.meta.trial_id}:{self.index}"

    def to_dict(self) -> dict:
        return {
            "window_id": self.window_id,
            "index": self.index,
            "t_start": self.frame.t_start,
            "t_end": self.frame.t_end,
            "shape": list(self.frame.channels.shape),
            "channels": self.frame.channels.ravel().tolist(),
            "c3_raw": self.c3_raw,
            "gt": self.gt,
            "flagged": self.flagged,
            "meta": self.meta.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredWindow":
        channels = np.asarray(d["channels"], dtype=float).reshape(d["shape"])
        return cls(
            frame=DataFrame(channels, float(d["t_start"]), float(d["t_end"])),
            c3_raw=float(d["c3_raw"]),
            meta=TrialMeta.from_dict(d["meta"]),
            index=int(d["index"]),
            gt=None if d["gt"] is None else float(d["gt"]),
            flagged=bool(d.get("flagged", False)),
        )


def write_windows_jsonl(windows: Iterable[ScoredWindow], path: str | Path,
                        extra: dict[str, dict] | None = None) -> Path:
    """One window per line; ``extra`` maps window ids to additional fields."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for w in windows:
            rec = w.to_dict()
            if extra and w.window_id in extra:
                rec.update(extra[w.window_id])
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return path


def read_windows_jsonl(path: str | Path) -> tuple[list[ScoredWindow], list[dict]]:
    """Return the windows and the raw records (for fields such as ``split``)."""
    windows, records = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                windows.append(ScoredWindow.from_dict(rec))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad window record ({exc})") from exc
            records.append(rec)
    return windows, records


def stack_frames(windows: Sequence[ScoredWindow]) -> np.ndarray:
    """(n, 8, 200) input tensor for the regressor."""
    if not windows:
        return np.zeros((0, len(CHANNEL_ORDER), WINDOW_LENGTH))
    return np.stack([w.frame.channels for w in windows])
