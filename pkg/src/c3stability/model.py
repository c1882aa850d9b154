"""Small 1-D convolutional regressor with hand-written backpropagation.

The network is a flat sequence of layers described by plain dicts::

    {"type": "conv1d", "in": 8, "out": 16, "kernel": 5, "stride": 2}
    {"type": "relu"} | {"type": "gap"} | {"type": "dropout", "p": 0.5}
    {"type": "dense", "in": 64, "out": 32} | {"type": "sigmoid"}

Parameters live in a dict keyed ``"<layer index>.W"`` / ``"<layer index>.b"``.
Computation is float64; checkpoints store float32 blobs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError

FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_LOGIT_BOUND = 36.0


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, of another version, or inconsistent."""


@dataclass(frozen=True)
class ArchitectureSpec:
    input_channels: int = 8
    input_length: int = 200
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        shapes = self.shapes()  # raises on inconsistency
        if shapes[-1] != (1,):
            raise ValueError(f"network must end in a scalar output, got {shapes[-1]}")

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shape after each layer (index 0 = input)."""
        shape: tuple[int, ...] = (self.input_channels, self.input_length)
        out = [shape]
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv1d":
                if len(shape) != 2 or shape[0] != layer["in"]:
                    raise ValueError(f"layer {i}: conv1d expects {layer['in']} channels, got {shape}")
                n = (shape[1] - layer["kernel"]) // layer["stride"] + 1
                if n < 1:
                    raise ValueError(f"layer {i}: kernel longer than input")
                shape = (layer["out"], n)
            elif kind == "gap":
                shape = (shape[0],)
            elif kind == "dense":
                if shape != (layer["in"],):
                    raise ValueError(f"layer {i}: dense expects ({layer['in']},), got {shape}")
                shape = (layer["out"],)
            elif kind == "dropout":
                if not 0 <= layer["p"] < 1:
                    raise ValueError(f"layer {i}: dropout p must lie in [0, 1)")
            elif kind not in ("relu", "sigmoid"):
                raise ValueError(f"layer {i}: unknown layer type {kind!r}")
            out.append(shape)
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if layer["type"] == "conv1d":
                shapes[f"{i}.W"] = (layer["out"], layer["in"], layer["kernel"])
                shapes[f"{i}.b"] = (layer["out"],)
            elif layer["type"] == "dense":
                shapes[f"{i}.W"] = (layer["out"], layer["in"])
                shapes[f"{i}.b"] = (layer["out"],)
        return shapes

    def with_dropout(self, p: float) -> "ArchitectureSpec":
        layers = [dict(l, p=p) if l["type"] == "dropout" else l for l in self.layers]
        return replace(self, layers=tuple(layers))

    def to_dict(self) -> dict:
        return {"input_channels": self.input_channels, "input_length": self.input_length,
                "layers": [dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(int(d["input_channels"]), int(d["input_length"]), tuple(d["layers"]))


def default_architecture(input_channels: int = 8, dropout: float = 0.5) -> ArchitectureSpec:
    return ArchitectureSpec(input_channels, 200, (
        {"type": "conv1d", "in": input_channels, "out": 16, "kernel": 5, "stride": 2},
        {"type": "relu"},
        {"type": "conv1d", "in": 16, "out": 32, "kernel": 5, "stride": 2},
        {"type": "relu"},
        {"type": "conv1d", "in": 32, "out": 64, "kernel": 3, "stride": 2},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "dropout", "p": dropout},
        {"type": "dense", "in": 64, "out": 32},
        {"type": "relu"},
        {"type": "dense", "in": 32, "out": 1},
        {"type": "sigmoid"},
    ))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "mse"
    shuffle_seed: int = 0
    init_seed: int = 0
    dropout_seed: int = 0
    # start the output unit at the logit of the mean label instead of 0.5
    output_bias_from_targets: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.loss != "mse":
            raise ValueError(f"only the mse loss is supported, got {self.loss!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ModelCheckpoint:
    arch: ArchitectureSpec
    params: dict[str, np.ndarray]
    train_config: TrainConfig = field(default_factory=TrainConfig)
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    channels: tuple[int, ...] | None = None
    curve: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if set(expected) != set(self.params):
            raise CheckpointError(f"parameter names {sorted(self.params)} do not match "
                                  f"architecture {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {shape}")

    def prepare(self, batch: np.ndarray) -> np.ndarray:
        """Select channels and standardise raw 8x200 frames for the network."""
        x = np.asarray(batch, dtype=float)
        if self.channels is not None:
            x = x[:, list(self.channels), :]
        if self.input_mean is not None:
            x = (x - self.input_mean[None, :, None]) / self.input_scale[None, :, None]
        return x


# ---------------------------------------------------------------------------
# initialisation


def init_weights(arch: ArchitectureSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return params


# ---------------------------------------------------------------------------
# forward / backward


def _conv_cols(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (B, C, L) -> (B, C, L_out, K) view
    return np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def _forward(params, arch: ArchitectureSpec, x: np.ndarray, training: bool,
             rng: np.random.Generator | None):
    if x.ndim != 3 or x.shape[1:] != (arch.input_channels, arch.input_length):
        raise DataError(f"batch must be (B, {arch.input_channels}, {arch.input_length}), "
                        f"got {x.shape}")
    cache = []
    h = x
    for i, layer in enumerate(arch.layers):
        kind = layer["type"]
        if kind == "conv1d":
            cols = _conv_cols(h, layer["kernel"], layer["stride"])
            W = params[f"{i}.W"]
            out = np.tensordot(cols, W, axes=([1, 3], [1, 2]))  # (B, L_out, O)
            out = out.transpose(0, 2, 1) + params[f"{i}.b"][None, :, None]
            cache.append((cols, h.shape))
            h = out
        elif kind == "relu":
            mask = h > 0
            cache.append(mask)
            h = h * mask
        elif kind == "gap":
            cache.append(h.shape)
            h = h.mean(axis=2)
        elif kind == "dropout":
            p = layer["p"]
            if training and p > 0:
                keep = (rng.random(h.shape) >= p) / (1.0 - p)
                cache.append(keep)
                h = h * keep
            else:
                cache.append(None)
        elif kind == "dense":
            cache.append(h)
            h = h @ params[f"{i}.W"].T + params[f"{i}.b"]
        elif kind == "sigmoid":
            # beyond +-36 the float64 sigmoid rounds to exactly 0 or 1
            inside = np.abs(h) <= _LOGIT_BOUND
            h = 1.0 / (1.0 + np.exp(-np.clip(h, -_LOGIT_BOUND, _LOGIT_BOUND)))
            cache.append((h, inside))
    return h[:, 0], cache


def _backward(params, arch: ArchitectureSpec, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    g = dout[:, None]
    for i in range(len(arch.layers) - 1, -1, -1):
        layer, c = arch.layers[i], cache[i]
        kind = layer["type"]
        if kind == "sigmoid":
            h, inside = c
            g = g * h * (1.0 - h) * inside
        elif kind == "dense":
            grads[f"{i}.W"] = g.T @ c
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ params[f"{i}.W"]
        elif kind == "dropout":
            if c is not None:
                g = g * c
        elif kind == "gap":
            g = np.broadcast_to(g[:, :, None] / c[2], c)
        elif kind == "relu":
            g = g * c
        elif kind == "conv1d":
            cols, in_shape = c
            k, s = layer["kernel"], layer["stride"]
            grads[f"{i}.W"] = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
            grads[f"{i}.b"] = g.sum(axis=(0, 2))
            if i == 0:
                break
            dcols = np.tensordot(g, params[f"{i}.W"], axes=([1], [0]))  # (B, L_out, C, K)
            dx = np.zeros(in_shape)
            n_out = g.shape[2]
            for j in range(k):
                dx[:, :, j:j + s * (n_out - 1) + 1:s] += dcols[:, :, :, j].transpose(0, 2, 1)
            g = dx
    return grads


def _dropout_rng(dropout_seed: int | None) -> np.random.Generator:
    return np.random.default_rng(0 if dropout_seed is None else dropout_seed)


def forward(ckpt: ModelCheckpoint, batch: np.ndarray, training_mode: bool = False,
            dropout_seed: int | None = None) -> np.ndarray:
    """Predictions in (0, 1) for a (B, 8, 200) batch of raw frames."""
    x = ckpt.prepare(batch)
    if not np.all(np.isfinite(x)):
        raise DataError("batch contains non-finite values")
    rng = _dropout_rng(dropout_seed) if training_mode else None
    pred, _ = _forward(ckpt.params, ckpt.arch, x, training_mode, rng)
    return pred


def loss_and_grads(params: dict[str, np.ndarray], arch: ArchitectureSpec, x: np.ndarray,
                   targets: np.ndarray, training_mode: bool = False,
                   dropout_seed: int | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """MSE over the batch and its gradient w.r.t. every parameter.

    ``x`` is the network input (already standardised).
    """
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (x.shape[0],):
        raise DataError(f"targets must have shape ({x.shape[0]},), got {targets.shape}")
    rng = _dropout_rng(dropout_seed) if training_mode else None
    pred, cache = _forward(params, arch, x, training_mode, rng)
    err = pred - targets
    loss = float(np.mean(err * err))
    grads = _backward(params, arch, cache, 2.0 * err / len(err))
    return loss, grads


def backward(ckpt: ModelCheckpoint, batch: np.ndarray, targets: np.ndarray,
             training_mode: bool = False, dropout_seed: int | None = None
             ) -> tuple[dict[str, np.ndarray], float]:
    """Gradients and loss for raw frames, mirroring :func:`forward`."""
    loss, grads = loss_and_grads(ckpt.params, ckpt.arch, ckpt.prepare(batch), targets,
                                 training_mode, dropout_seed)
    return grads, loss


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              t: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update at step ``t`` (1-based); inputs are not mutated."""
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v)


# ---------------------------------------------------------------------------
# training


def _predict_x(params, arch, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [_forward(params, arch, x[i:i + batch_size], False, None)[0]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and scale over samples and time; flat channels get scale 1."""
    mean = x.mean(axis=(0, 2))
    scale = x.std(axis=(0, 2))
    scale = np.where(scale > 1e-8, scale, 1.0)
    return mean, scale


def round_to_float32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: p.astype("<f4").astype(float) for k, p in params.items()}


def train(x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
          arch: ArchitectureSpec | None = None, config: TrainConfig = TrainConfig(),
          standardize: bool = True, channels: Sequence[int] | None = None,
          progress=None) -> ModelCheckpoint:
    """Fixed-length minibatch Adam training on raw (n, 8, 200) frames.

    The curve holds eval-mode train/validation MSE before training (epoch 0)
    and after every epoch. Final weights are rounded to float32 so the
    returned checkpoint equals what :func:`save_checkpoint` writes.
    """
    x_train = np.asarray(x_train, dtype=float)
    x_val = np.asarray(x_val, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must both be non-empty")
    chan = tuple(range(x_train.shape[1])) if channels is None else tuple(channels)
    if arch is None:
        arch = default_architecture(len(chan))
    ckpt = ModelCheckpoint(arch, init_weights(arch, config.init_seed), config,
                           channels=None if channels is None else chan)
    if standardize:
        ckpt.input_mean, ckpt.input_scale = standardization(x_train[:, list(chan), :])
    xt, xv = ckpt.prepare(x_train), ckpt.prepare(x_val)
    if config.output_bias_from_targets:
        _set_output_bias(ckpt, float(np.mean(y_train)))

    params = ckpt.params
    state = AdamState.zeros_like(params)
    shuffle = np.random.default_rng(config.shuffle_seed)
    curve = [{"epoch": 0, "train_mse": _mse(_predict_x(params, arch, xt), y_train),
              "val_mse": _mse(_predict_x(params, arch, xv), y_val)}]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(xt))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            step += 1
            _, grads = loss_and_grads(params, arch, xt[idx], y_train[idx], True,
                                      dropout_seed=_step_seed(config.dropout_seed, step))
            params, state = adam_step(params, grads, state, step, config.learning_rate,
                                      config.beta1, config.beta2, config.epsilon)
        curve.append({"epoch": epoch,
                      "train_mse": _mse(_predict_x(params, arch, xt), y_train),
                      "val_mse": _mse(_predict_x(params, arch, xv), y_val)})
        if progress is not None:
            progress(curve[-1])
    ckpt.params = round_to_float32(params)
    ckpt.curve = curve
    return ckpt


def _set_output_bias(ckpt: ModelCheckpoint, target_mean: float) -> None:
    layers = ckpt.arch.layers
    if len(layers) >= 2 and layers[-1]["type"] == "sigmoid" and layers[-2]["type"] == "dense":
        m = min(max(target_mean, 1e-3), 1 - 1e-3)
        ckpt.params[f"{len(layers) - 2}.b"][:] = math.log(m / (1 - m))


def _step_seed(dropout_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([dropout_seed, step]).generate_state(1)[0])


def predict(ckpt: ModelCheckpoint, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    x = ckpt.prepare(batch)
    if not np.all(np.isfinite(x)):
        raise DataError("batch contains non-finite values")
    return _predict_x(ckpt.params, ckpt.arch, x, batch_size)


# ---------------------------------------------------------------------------
# checkpoint container


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    """Zip container: ``checkpoint.json``, ``weights/<name>.f32`` and ``curve.csv``."""
    path = Path(path)
    weights = []
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        weights.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "file": f"weights/{name}.f32"})
    desc = {
        "format": "c3stability-checkpoint",
        "version": ckpt.version,
        "architecture": ckpt.arch.to_dict(),
        "train_config": asdict(ckpt.train_config),
        "preprocessing": {
            "channels": None if ckpt.channels is None else list(ckpt.channels),
            "input_mean": None if ckpt.input_mean is None else ckpt.input_mean.tolist(),
            "input_scale": None if ckpt.input_scale is None else ckpt.input_scale.tolist(),
        },
        "weights": weights,
        "provenance": ckpt.provenance,
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_mse", "val_mse"))
    for row in ckpt.curve:
        w.writerow((row["epoch"], repr(float(row["train_mse"])), repr(float(row["val_mse"]))))
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "checkpoint.json",
                   (json.dumps(desc, indent=2, sort_keys=True) + "\n").encode())
        for item in weights:
            _zip_write(zf, item["file"], ckpt.params[item["name"]].astype("<f4").tobytes())
        _zip_write(zf, "curve.csv", buf.getvalue().encode())
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            desc = json.loads(zf.read("checkpoint.json"))
            if desc.get("format") != "c3stability-checkpoint":
                raise CheckpointError(f"{path}: not a c3stability checkpoint")
            if desc.get("version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: checkpoint format version "
                                      f"{desc.get('version')!r}, expected {FORMAT_VERSION}")
            params = {}
            for item in desc["weights"]:
                raw = zf.read(item["file"])
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != int(np.prod(item["shape"])):
                    raise CheckpointError(f"{path}: {item['name']} has {arr.size} values, "
                                          f"expected shape {item['shape']}")
                params[item["name"]] = arr.reshape(item["shape"]).astype(float)
            rows = list(csv.DictReader(io.StringIO(zf.read("curve.csv").decode())))
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint (format version {FORMAT_VERSION} "
                              f"expected): {exc}") from exc
    pre = desc["preprocessing"]
    return ModelCheckpoint(
        arch=ArchitectureSpec.from_dict(desc["architecture"]),
        params=params,
        train_config=TrainConfig.from_dict(desc["train_config"]),
        input_mean=None if pre["input_mean"] is None else np.array(pre["input_mean"]),
        input_scale=None if pre["input_scale"] is None else np.array(pre["input_scale"]),
        channels=None if pre["channels"] is None else tuple(pre["channels"]),
        curve=[{"epoch": int(r["epoch"]), "train_mse": float(r["train_mse"]),
                "val_mse": float(r["val_mse"])} for r in rows],
        provenance=desc.get("provenance", {}),
        version=desc["version"],
    )
