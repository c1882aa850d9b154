"""Command-line driver: simulate -> score -> build-dataset -> train -> eval -> report.

Exit codes: 0 success, 1 bad data (including provenance mismatches),
2 usage or configuration problems.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .c3score import C3Config, score_windows, write_scores_csv
from .config import CONFIG_ENV, RunConfig, hash_json, parse_override
from .core import ConfigError, DataError, read_runlog, read_windows_jsonl, stack_frames
from .evalreport import Prediction, evaluate, read_predictions, render_report, write_predictions
from .model import (CheckpointError, default_architecture, load_checkpoint, predict,
                    save_checkpoint, train)
from .pipeline import build_dataset, make_windows, read_manifest, write_dataset
from .simgen import TRIAL_FILES, file_sha256, generate_campaign, write_campaign

log = logging.getLogger("c3stability")


class UsageError(Exception):
    pass


class ProvenanceError(DataError):
    pass


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc.strerror or exc}") from exc
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> RunConfig:
    overrides = [parse_override(s) for s in (args.set or [])]
    for key, flag in (("sim.seed", "seed"), ("split.split_seed", "split_seed"),
                      ("pipeline.holdout_terrain", "holdout_terrain")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(parse_override(f"{key}={json.dumps(value)}"))
    return RunConfig.load(args.config, overrides)


def _trial_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise UsageError(f"trials directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise DataError(f"no trial directories under {root}")
    return dirs


def _verify_campaign(root: Path, dirs: list[Path]) -> str | None:
    """Check trial files against ``campaign.json``; return its hash if present."""
    index_path = root / "campaign.json"
    if not index_path.is_file():
        log.warning("%s has no campaign.json; trial hashes not verified", root)
        return None
    index = json.loads(index_path.read_text(encoding="utf-8"))["trials"]
    for d in dirs:
        expected = index.get(d.name)
        if expected is None:
            raise ProvenanceError(f"trial {d.name} is not listed in {index_path}")
        for name in TRIAL_FILES:
            if file_sha256(d / name) != expected[name]:
                raise ProvenanceError(f"{d / name} does not match the hash in {index_path}")
    return file_sha256(index_path)


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _writable_dir(Path(args.out))
    logs = generate_campaign(cfg.matrix, cfg.sim, cfg.terrains)
    trials = write_campaign(logs, out)
    counts = Counter(run.meta.class_label for run in logs)
    _write_json(out / "campaign.json", {
        "provenance": cfg.provenance("simulate", ("sim", "terrains", "matrix"),
                                     seed=cfg.sim.seed),
        "class_counts": dict(sorted(counts.items())),
        "trials": trials,
    })
    for label, n in sorted(counts.items()):
        print(f"{label}\t{n}")
    print(f"{len(logs)} trials written to {out}")
    return 0


def cmd_score(args) -> int:
    cfg = _load_config(args)
    if args.c3_config:
        try:
            c3 = C3Config.from_dict(json.loads(Path(args.c3_config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot load C3 config {args.c3_config}: {exc}") from exc
    else:
        c3 = cfg.c3
    root = Path(args.trials)
    dirs = _trial_dirs(root)
    out = _writable_dir(Path(args.out) if args.out else root)
    for d in dirs:
        run = read_runlog(d)
        scores = score_windows(run, make_windows(run), c3)
        target = _writable_dir(out / d.name)
        write_scores_csv(scores, target / "scores.csv")
        flagged = sum(s.flagged for s in scores)
        print(f"{d.name}\t{len(scores)} windows\t{flagged} flagged")
    _write_json(out / "scores.json", {"provenance": {
        "stage": "score", "version": __version__, "c3": c3.to_dict(),
        "config_hash": hash_json(c3.to_dict()),
        "campaign_sha256": _verify_campaign(root, dirs)}})
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _load_config(args)
    root = Path(args.trials)
    dirs = _trial_dirs(root)
    campaign_sha = _verify_campaign(root, dirs)
    out = _writable_dir(Path(args.out))
    logs = [read_runlog(d) for d in dirs]
    pipe = cfg.raw["pipeline"]
    built = build_dataset(logs, cfg.c3, cfg.split, holdout_terrain=pipe["holdout_terrain"],
                          min_mean_speed=pipe["min_mean_speed"])
    built.manifest.config_hashes["run"] = cfg.section_hash("c3", "split", "pipeline")
    write_dataset(built, out)
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest["provenance"] = cfg.provenance("build-dataset", ("c3", "split", "pipeline"),
                                            campaign_sha256=campaign_sha)
    _write_json(manifest_path, manifest)
    m = built.manifest
    print(f"train {m.n_train}  validation {m.n_validation}  test {m.n_test}  "
          f"c3_max {m.c3_max:.6g}")
    return 0


def _load_dataset(directory: Path):
    manifest_path = directory / "manifest.json"
    data_path = directory / "dataset.jsonl"
    if not manifest_path.is_file() or not data_path.is_file():
        raise UsageError(f"{directory} must contain dataset.jsonl and manifest.json")
    manifest = read_manifest(manifest_path)
    if file_sha256(data_path) != manifest.files.get("dataset.jsonl"):
        raise ProvenanceError(f"{data_path} does not match the hash in {manifest_path}")
    windows, records = read_windows_jsonl(data_path)
    return manifest, windows, records


def cmd_train(args) -> int:
    cfg = _load_config(args)
    directory = Path(args.dataset)
    manifest, windows, records = _load_dataset(directory)
    train_w = [w for w, r in zip(windows, records) if r.get("split") == "train"]
    val_w = [w for w, r in zip(windows, records) if r.get("split") == "validation"]
    if not train_w or not val_w:
        raise ConfigError("dataset has an empty train or validation split")
    model = cfg.raw["model"]
    channels = model["channels"]
    arch = default_architecture(8 if channels is None else len(channels), model["dropout"])

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']:3d}  train {row['train_mse']:.6f}  val {row['val_mse']:.6f}")

    ckpt = train(stack_frames(train_w), [w.gt for w in train_w],
                 stack_frames(val_w), [w.gt for w in val_w], arch, cfg.train_config,
                 standardize=model["standardize"], channels=channels, progress=progress)
    ckpt.provenance = cfg.provenance(
        "train", ("model", "train"),
        dataset_sha256=file_sha256(directory / "dataset.jsonl"),
        manifest_sha256=file_sha256(directory / "manifest.json"),
        c3_max=manifest.c3_max)
    out = Path(args.out)
    _writable_dir(out.parent)
    save_checkpoint(ckpt, out)
    first, last = ckpt.curve[0], ckpt.curve[-1]
    print(f"train mse {first['train_mse']:.6f} -> {last['train_mse']:.6f}  "
          f"val mse {first['val_mse']:.6f} -> {last['val_mse']:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path, test_path = Path(args.checkpoint), Path(args.test)
    for p in (ckpt_path, test_path):
        if not p.is_file():
            raise UsageError(f"{p} does not exist")
    ckpt = load_checkpoint(ckpt_path)
    windows, _ = read_windows_jsonl(test_path)
    if not windows:
        raise DataError(f"{test_path} has no windows")
    preds = predict(ckpt, stack_frames(windows))
    rows = [Prediction(w.window_id, w.meta.terrain, w.meta.commanded_speed, float(w.gt), float(p))
            for w, p in zip(windows, preds)]
    out = Path(args.out)
    _writable_dir(out.parent)
    write_predictions(rows, out)
    _write_json(_sidecar(out), {"provenance": {
        "stage": "eval", "version": __version__,
        "checkpoint_sha256": file_sha256(ckpt_path),
        "checkpoint_config_hash": ckpt.provenance.get("config_hash"),
        "test_sha256": file_sha256(test_path),
        "predictions_sha256": file_sha256(out)}})
    print(f"{len(rows)} predictions written to {out}")
    return 0


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".provenance.json")


def cmd_report(args) -> int:
    pred_path = Path(args.predictions)
    if not pred_path.is_file():
        raise UsageError(f"{pred_path} does not exist")
    upstream = None
    side = _sidecar(pred_path)
    if side.is_file():
        upstream = json.loads(side.read_text(encoding="utf-8"))["provenance"]
        if upstream.get("predictions_sha256") != file_sha256(pred_path):
            raise ProvenanceError(f"{pred_path} does not match the hash in {side}")
    rows = read_predictions(pred_path)
    report = evaluate(rows, args.bins, (-1.0, 1.0))
    out = _writable_dir(Path(args.out))
    render_report(report, rows, out, provenance={
        "stage": "report", "version": __version__,
        "predictions_sha256": file_sha256(pred_path), "upstream": upstream})
    print(f"mse {report.mse:.6f}  bias {report.bias:+.6f}  n {report.n}")
    return 0


def cmd_run(args) -> int:
    """All stages into one output directory."""
    out = _writable_dir(Path(args.out))
    cfg = _load_config(args)
    _write_json(out / "run_config.json", cfg.raw)
    base = ["--config", str(out / "run_config.json")]
    holdout = cfg.raw["pipeline"]["holdout_terrain"]
    steps = [
        ["simulate", *base, "--out", str(out / "trials")],
        ["build-dataset", *base, "--trials", str(out / "trials"), "--out", str(out / "dataset")],
        ["train", *base, "--dataset", str(out / "dataset"), "--out", str(out / "model.zip")],
        ["eval", "--checkpoint", str(out / "model.zip"),
         "--test", str(out / "dataset" / f"test_{holdout}.jsonl"),
         "--out", str(out / "predictions.csv")],
        ["report", "--predictions", str(out / "predictions.csv"), "--out", str(out / "report")],
    ]
    for argv in steps:
        code = main(argv)
        if code:
            return code
    return 0


# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help=f"run configuration JSON (default: ${CONFIG_ENV} if set)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c3stability", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="more output")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic trial campaign")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="directory for trial folders")
    p.add_argument("--seed", type=int, default=None, help="campaign seed (overrides sim.seed)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("score", help="write per-window C3 scores.csv for each trial")
    _add_config_flags(p)
    p.add_argument("--trials", required=True, help="directory of trial folders")
    p.add_argument("--c3-config", default=None, help="JSON file with C3Config fields")
    p.add_argument("--out", default=None, help="output root (default: the trials directory)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("build-dataset", help="window, label, balance and split trials")
    _add_config_flags(p)
    p.add_argument("--trials", required=True, help="directory of trial folders")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--holdout-terrain", default=None, help="terrain kept out as test set")
    p.add_argument("--split-seed", type=int, default=None, help="seed for balance and split")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train the regressor on a built dataset")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True, help="directory with dataset.jsonl + manifest.json")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict a test file with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--test", required=True, help="test_<terrain>.jsonl")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="MSE, error histogram and SVG figures")
    p.add_argument("--predictions", required=True, help="predictions CSV from eval")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--bins", type=int, default=50, help="histogram bins over [-1, 1]")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="every stage end to end")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="campaign seed (overrides sim.seed)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
