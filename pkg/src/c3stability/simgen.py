"""Deterministic synthetic trial generator.

A robot drives straight at a static marker. One latent disturbance process,
built from seeded sums of sinusoids, moves both the marker center in the
image and the IMU channels, so proprioception carries information about the
visual score. Disturbance amplitude is ``roughness * speed**speed_exponent``
modulated by a slow log-normal envelope (patches of rougher ground).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import SPEEDS, TERRAINS, ConfigError, DataError, RunLog, TrialMeta, write_runlog

log = logging.getLogger(__name__)

GRAVITY = 9.80665
IMAGE_CENTER = (320.0, 240.0)


@dataclass(frozen=True)
class TerrainProfile:
    name: str
    roughness: float

    def __post_init__(self):
        if not self.roughness >= 0:
            raise ConfigError(f"roughness must be >= 0, got {self.roughness!r}")


DEFAULT_TERRAINS = (
    TerrainProfile("pavement", 0.25),
    TerrainProfile("grass", 0.6),
    TerrainProfile("dirt", 1.0),
    TerrainProfile("dirt_rocks", 1.5),
)


def check_terrain_order(terrains: Sequence[TerrainProfile]) -> None:
    """Roughness must increase strictly along pavement < grass < dirt < dirt_rocks."""
    by_name = {t.name: t.roughness for t in terrains}
    present = [name for name in TERRAINS if name in by_name]
    for a, b in zip(present, present[1:]):
        if not by_name[a] < by_name[b]:
            raise ConfigError(f"terrain roughness must increase: {a} ({by_name[a]}) "
                              f"vs {b} ({by_name[b]})")


@dataclass(frozen=True)
class SimConfig:
    imu_rate: float = 200.0
    gps_rate: float = 10.0
    cam_rate: float = 60.0
    duration: float = 14.0
    start_distance: float = 40.0
    speed_exponent: float = 1.5
    base_jitter_px: float = 3.0
    imu_coupling: float = 0.3
    noise_floor: float = 0.02
    seed: int = 0
    # knobs below shape the signal model; all in native units of the stream
    stationary_prefix: float = 1.0
    ramp_time: float = 0.5
    pixel_noise: float = 0.5
    gps_noise: float = 0.005
    accel_gain: float = 4.0
    band_hz: tuple[float, float] = (1.0, 8.0)
    n_components: int = 12
    envelope_sigma: float = 0.6
    envelope_band_hz: tuple[float, float] = (0.05, 0.5)
    dropout_prob: float = 0.01

    def __post_init__(self):
        for name in ("imu_rate", "gps_rate", "cam_rate", "duration", "start_distance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("noise_floor", "pixel_noise", "gps_noise", "base_jitter_px",
                     "imu_coupling", "stationary_prefix", "ramp_time", "envelope_sigma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob!r}")
        if self.n_components < 1:
            raise ConfigError("n_components must be >= 1")
        object.__setattr__(self, "band_hz", tuple(self.band_hz))
        object.__setattr__(self, "envelope_band_hz", tuple(self.envelope_band_hz))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band_hz"] = list(self.band_hz)
        d["envelope_band_hz"] = list(self.envelope_band_hz)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**d)


class _Latent:
    """Unit-RMS sum of sinusoids with seeded frequencies and phases."""

    def __init__(self, rng: np.random.Generator, band: tuple[float, float], n: int):
        self.freq = rng.uniform(band[0], band[1], n)
        self.phase = rng.uniform(0.0, 2 * math.pi, n)
        self.amp = math.sqrt(2.0 / n)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        arg = 2 * math.pi * np.outer(t, self.freq) + self.phase
        return self.amp * np.sin(arg).sum(axis=1)


def _sample_times(rate: float, duration: float) -> np.ndarray:
    return np.arange(int(round(rate * duration))) / rate


def _speed_profile(t: np.ndarray, speed: float, cfg: SimConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Commanded speed, distance travelled and forward acceleration at ``t``."""
    s = t - cfg.stationary_prefix
    if cfg.ramp_time > 0:
        frac = np.clip(s / cfg.ramp_time, 0.0, 1.0)
        dist = np.where(s <= 0, 0.0,
                        np.where(s < cfg.ramp_time, 0.5 * speed * s * s / cfg.ramp_time,
                                 speed * (s - 0.5 * cfg.ramp_time)))
        accel = np.where((s > 0) & (s < cfg.ramp_time), speed / cfg.ramp_time, 0.0)
    else:
        frac = (s >= 0).astype(float)
        dist = np.where(s > 0, speed * s, 0.0)
        accel = np.zeros_like(t)
    return speed * frac, dist, accel


def simulate_trial(terrain: TerrainProfile, speed: float, cfg: SimConfig = SimConfig(),
                   trial_id: str | None = None) -> RunLog:
    """One synthetic trial; identical arguments give a bit-identical log."""
    if not speed > 0:
        raise DataError(f"speed must be positive, got {speed!r}")
    if speed not in SPEEDS:
        log.warning("speed %r is not one of the field speeds %s", speed, SPEEDS)
    rng = np.random.default_rng(cfg.seed)
    # latent axes: pitch, yaw, roll, heave
    axes = [_Latent(rng, cfg.band_hz, cfg.n_components) for _ in range(4)]
    env_proc = _Latent(rng, cfg.envelope_band_hz, cfg.n_components)
    lateral = _Latent(rng, cfg.envelope_band_hz, cfg.n_components)

    def amplitude(t):
        v, _, _ = _speed_profile(t, speed, cfg)
        env = np.exp(cfg.envelope_sigma * env_proc(t) - 0.5 * cfg.envelope_sigma ** 2)
        return terrain.roughness * v ** cfg.speed_exponent * env

    # IMU
    t_imu = _sample_times(cfg.imu_rate, cfg.duration)
    a = amplitude(t_imu)
    pitch, yaw, roll, heave = (ax(t_imu) for ax in axes)
    _, _, fwd_acc = _speed_profile(t_imu, speed, cfg)
    k_g, k_a = cfg.imu_coupling, cfg.imu_coupling * cfg.accel_gain
    noise = rng.standard_normal((len(t_imu), 6)) * cfg.noise_floor
    imu = np.column_stack([
        t_imu,
        k_g * a * roll + noise[:, 0],
        k_g * a * pitch + noise[:, 1],
        k_g * a * yaw + noise[:, 2],
        fwd_acc + k_a * a * pitch + noise[:, 3],
        k_a * a * roll + noise[:, 4],
        GRAVITY + k_a * a * heave + noise[:, 5],
    ])

    # GPS: marker straight ahead on the x axis
    t_gps = _sample_times(cfg.gps_rate, cfg.duration)
    _, dist, _ = _speed_profile(t_gps, speed, cfg)
    a_gps = amplitude(t_gps)
    gps_noise = rng.standard_normal((len(t_gps), 2)) * cfg.gps_noise
    gps = np.column_stack([
        t_gps,
        dist + 0.01 * a_gps * axes[3](t_gps) + gps_noise[:, 0],
        0.05 * a_gps * lateral(t_gps) + gps_noise[:, 1],
    ])

    # camera
    t_cam = _sample_times(cfg.cam_rate, cfg.duration)
    a_cam = amplitude(t_cam)
    px_noise = rng.standard_normal((len(t_cam), 2)) * cfg.pixel_noise
    u = IMAGE_CENTER[0] + cfg.base_jitter_px * a_cam * axes[1](t_cam) + px_noise[:, 0]
    v = IMAGE_CENTER[1] + cfg.base_jitter_px * a_cam * axes[0](t_cam) + px_noise[:, 1]
    detected = rng.random(len(t_cam)) >= cfg.dropout_prob
    u = np.where(detected, u, np.nan)
    v = np.where(detected, v, np.nan)

    meta = TrialMeta(terrain.name, float(speed),
                     trial_id or f"{terrain.name}_{speed:g}_s{cfg.seed}", int(cfg.seed))
    return RunLog(meta=meta, imu=imu, gps=gps, marker=np.column_stack([t_cam, u, v]),
                  detected=detected, marker_position=(cfg.start_distance, 0.0))


# ---------------------------------------------------------------------------
# campaigns


@dataclass(frozen=True)
class CampaignEntry:
    terrain: str
    speed: float
    n_trials: int


def derive_seed(campaign_seed: int, trial_index: int) -> int:
    """Independent per-trial seed from the campaign seed and trial position."""
    ss = np.random.SeedSequence([int(campaign_seed), int(trial_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# 86 trials; fewer high-speed runs on rough ground, as in the field campaign
DEFAULT_MATRIX = tuple(
    CampaignEntry(terrain, speed, n)
    for terrain, counts in (
        ("pavement", (7, 6, 7)),
        ("grass", (8, 6, 8)),
        ("dirt", (9, 7, 6)),
        ("dirt_rocks", (9, 7, 6)),
    )
    for speed, n in zip(SPEEDS, counts)
)


def generate_campaign(matrix: Sequence[CampaignEntry], cfg: SimConfig = SimConfig(),
                      terrains: Sequence[TerrainProfile] = DEFAULT_TERRAINS,
                      out_dir: str | Path | None = None) -> list[RunLog]:
    """Simulate every trial in ``matrix``; optionally write one directory per trial."""
    if not matrix:
        raise ConfigError("campaign matrix is empty")
    check_terrain_order(terrains)
    profiles = {t.name: t for t in terrains}
    logs = []
    k = 0
    for entry in matrix:
        if entry.terrain not in profiles:
            raise ConfigError(f"campaign references unknown terrain {entry.terrain!r}")
        for rep in range(entry.n_trials):
            trial_cfg = replace(cfg, seed=derive_seed(cfg.seed, k))
            trial_id = f"{k:03d}_{entry.terrain}_{entry.speed:g}_{rep}"
            logs.append(simulate_trial(profiles[entry.terrain], entry.speed, trial_cfg, trial_id))
            k += 1
    if out_dir is not None:
        write_campaign(logs, out_dir)
    return logs


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


TRIAL_FILES = ("meta.json", "imu.csv", "gps.csv", "marker.csv")


def write_campaign(logs: Sequence[RunLog], out_dir: str | Path) -> dict:
    """Write trial directories plus ``campaign.json`` listing per-file hashes."""
    out = Path(out_dir)
    index = {}
    for run in logs:
        d = out / run.meta.trial_id
        try:
            write_runlog(run, d)
        except OSError as exc:
            raise OSError(f"cannot write trial directory {d}: {exc}") from exc
        index[run.meta.trial_id] = {name: file_sha256(d / name) for name in TRIAL_FILES}
    return index


def matrix_from_json(items: Sequence[dict]) -> list[CampaignEntry]:
    return [CampaignEntry(str(i["terrain"]), float(i["speed"]), int(i["n_trials"]))
            for i in items]


def terrains_from_json(items: Sequence[dict]) -> list[TerrainProfile]:
    return [TerrainProfile(str(i["name"]), float(i["roughness"])) for i in items]


def load_sim_config(path: str | Path) -> tuple[SimConfig, list[TerrainProfile], list[CampaignEntry]]:
    """Read a JSON file with ``sim``, ``terrains`` and ``matrix`` sections."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = SimConfig.from_dict(d.get("sim", {}))
    terrains = terrains_from_json(d["terrains"]) if "terrains" in d else list(DEFAULT_TERRAINS)
    matrix = matrix_from_json(d["matrix"]) if "matrix" in d else list(DEFAULT_MATRIX)
    return cfg, terrains, matrix
