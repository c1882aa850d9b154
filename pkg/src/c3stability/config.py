"""Merged run configuration for the command-line stages."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .c3score import C3Config
from .core import ConfigError
from .model import TrainConfig
from .pipeline import SplitSpec
from .simgen import (DEFAULT_MATRIX, DEFAULT_TERRAINS, SimConfig, check_terrain_order,
                     matrix_from_json, terrains_from_json)

CONFIG_ENV = "C3STABILITY_CONFIG"


def default_config_dict() -> dict:
    return {
        "sim": SimConfig().to_dict(),
        "terrains": [asdict(t) for t in DEFAULT_TERRAINS],
        "matrix": [asdict(e) for e in DEFAULT_MATRIX],
        "c3": C3Config().to_dict(),
        "split": asdict(SplitSpec()),
        "pipeline": {"holdout_terrain": "grass", "min_mean_speed": 0.1},
        "model": {"dropout": 0.5, "standardize": True, "channels": None},
        "train": asdict(TrainConfig()),
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(item: str) -> dict:
    """``section.key=value`` (value parsed as JSON, else kept as a string)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


@dataclass
class RunConfig:
    raw: dict = field(default_factory=default_config_dict)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[dict] = ()) -> "RunConfig":
        """Defaults, then the JSON file (``path`` or $C3STABILITY_CONFIG), then overrides."""
        d = default_config_dict()
        path = path or os.environ.get(CONFIG_ENV)
        if path:
            try:
                d = _merge(d, json.loads(Path(path).read_text(encoding="utf-8")))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        for o in overrides:
            d = _merge(d, o)
        cfg = cls(d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Build every typed section once so bad values fail before any stage runs."""
        try:
            self.sim, self.c3, self.split, self.train_config
            check_terrain_order(self.terrains)
            self.matrix
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        holdout = self.raw["pipeline"]["holdout_terrain"]
        if holdout is not None and holdout not in {t.name for t in self.terrains}:
            raise ConfigError(f"holdout terrain {holdout!r} is not a configured terrain")

    @property
    def sim(self) -> SimConfig:
        return SimConfig.from_dict(self.raw["sim"])

    @property
    def terrains(self):
        return terrains_from_json(self.raw["terrains"])

    @property
    def matrix(self):
        return matrix_from_json(self.raw["matrix"])

    @property
    def c3(self) -> C3Config:
        return C3Config.from_dict(self.raw["c3"])

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(**self.raw["split"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.raw["train"])

    def section_hash(self, *sections: str) -> str:
        return hash_json({s: self.raw[s] for s in sections})

    def provenance(self, stage: str, sections: tuple[str, ...], **extra) -> dict:
        return {"stage": stage, "version": __version__,
                "config_hash": self.section_hash(*sections),
                "config": {s: self.raw[s] for s in sections}, **extra}


def hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
