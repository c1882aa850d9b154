import json
import zipfile

import pytest

from c3stability.cli import build_parser, main
from c3stability.config import RunConfig, parse_override
from c3stability.core import ConfigError, read_windows_jsonl

SMALL = {
    "sim": {"duration": 6.0, "seed": 3},
    "matrix": [{"terrain": t, "speed": v, "n_trials": 1}
               for t in ("pavement", "grass", "dirt", "dirt_rocks") for v in (0.5, 1.0, 1.5)],
    "train": {"epochs": 2},
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def run_dir(config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(config_path), "--out", str(out)]) == 0
    return out


def _help(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv + ["--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("cmd, flags", [
    ("simulate", ["--config", "--set", "--out", "--seed"]),
    ("score", ["--trials", "--c3-config", "--out"]),
    ("build-dataset", ["--trials", "--out", "--holdout-terrain", "--split-seed"]),
    ("train", ["--dataset", "--out"]),
    ("eval", ["--checkpoint", "--test", "--out"]),
    ("report", ["--predictions", "--out", "--bins"]),
    ("run", ["--config", "--out", "--seed"]),
])
def test_help_lists_flags(cmd, flags, capsys):
    text = _help([cmd], capsys)
    for flag in flags:
        assert flag in text


def test_top_level_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cmd in ("simulate", "score", "build-dataset", "train", "eval", "report", "run"):
        assert cmd in text


def test_simulate_counts_and_repeatability(config_path, tmp_path, capsys):
    args = ["simulate", "--config", str(config_path), "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "grass_1\t1" in out and "12 trials" in out
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*"))
    assert len([p for p in (tmp_path / "a").iterdir() if p.is_dir()]) == 12
    for rel in a:
        pa, pb = tmp_path / "a" / rel, tmp_path / "b" / rel
        if pa.is_file():
            assert pa.read_bytes() == pb.read_bytes()


def test_default_matrix_covers_every_class():
    # the default config simulates all 12 terrain x speed classes
    cfg = RunConfig.load()
    assert {(e.terrain, e.speed) for e in cfg.matrix} == {
        (t, v) for t in ("pavement", "grass", "dirt", "dirt_rocks") for v in (0.5, 1.0, 1.5)}


def test_unwritable_output_is_a_usage_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["simulate", "--out", str(blocker / "sub"), "--set", "sim.duration=2.0"])
    assert code == 2
    assert str(blocker / "sub") in capsys.readouterr().err


@pytest.mark.parametrize("override", ["sim.warp=1", "sim.imu_rate=-5", "nonsense",
                                      "pipeline.holdout_terrain=\"ice\""])
def test_bad_config_is_exit_two(override, tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--set", override]) == 2
    assert "error" in capsys.readouterr().err


def test_config_from_environment(config_path, monkeypatch):
    monkeypatch.setenv("C3STABILITY_CONFIG", str(config_path))
    assert RunConfig.load().sim.duration == 6.0
    assert RunConfig.load(overrides=[parse_override("sim.duration=3")]).sim.duration == 3


def test_override_parsing():
    assert parse_override("train.epochs=5") == {"train": {"epochs": 5}}
    assert parse_override("pipeline.holdout_terrain=dirt") == {
        "pipeline": {"holdout_terrain": "dirt"}}
    with pytest.raises(ConfigError):
        parse_override("train.epochs")


def test_run_layout(run_dir):
    for name in ("trials/campaign.json", "dataset/dataset.jsonl", "dataset/test_grass.jsonl",
                 "dataset/manifest.json", "model.zip", "predictions.csv",
                 "report/report.json", "report/errors.csv", "report/histogram.svg",
                 "report/trace.svg", "run_config.json"):
        assert (run_dir / name).is_file(), name


def test_holdout_never_in_train_or_validation(run_dir):
    windows, _ = read_windows_jsonl(run_dir / "dataset" / "dataset.jsonl")
    test, _ = read_windows_jsonl(run_dir / "dataset" / "test_grass.jsonl")
    assert windows and test
    assert all(w.meta.terrain != "grass" for w in windows)
    assert all(w.meta.terrain == "grass" for w in test)
    manifest = json.loads((run_dir / "dataset" / "manifest.json").read_text())
    assert manifest["n_test"] == len(test)
    assert manifest["n_train"] + manifest["n_validation"] == len(windows)


def test_provenance_chain(run_dir):
    manifest = json.loads((run_dir / "dataset" / "manifest.json").read_text())
    assert manifest["provenance"]["stage"] == "build-dataset"
    with zipfile.ZipFile(run_dir / "model.zip") as zf:
        desc = json.loads(zf.read("checkpoint.json"))
    assert desc["provenance"]["stage"] == "train"
    report = json.loads((run_dir / "report" / "report.json").read_text())
    assert report["provenance"]["upstream"]["stage"] == "eval"


def test_score_stage(run_dir, tmp_path, capsys):
    assert main(["score", "--trials", str(run_dir / "trials"), "--out", str(tmp_path)]) == 0
    csvs = sorted(tmp_path.glob("*/scores.csv"))
    assert len(csvs) == 12
    assert csvs[0].read_text().startswith("window_index,t_start,t_end,n_frames,c3_raw,flagged\n")
    assert json.loads((tmp_path / "scores.json").read_text())["provenance"]["campaign_sha256"]


def test_tampered_trial_is_a_data_error(run_dir, tmp_path, capsys):
    import shutil

    trials = tmp_path / "trials"
    shutil.copytree(run_dir / "trials", trials)
    victim = sorted(p for p in trials.iterdir() if p.is_dir())[0] / "gps.csv"
    victim.write_text(victim.read_text().replace("0.0", "0.5", 1))
    code = main(["build-dataset", "--trials", str(trials), "--out", str(tmp_path / "ds")])
    assert code == 1
    assert "does not match" in capsys.readouterr().err


def test_eval_needs_only_checkpoint_and_test_file(run_dir, tmp_path):
    import shutil

    shutil.copy(run_dir / "model.zip", tmp_path / "model.zip")
    shutil.copy(run_dir / "dataset" / "test_grass.jsonl", tmp_path / "test.jsonl")
    out = tmp_path / "pred.csv"
    assert main(["eval", "--checkpoint", str(tmp_path / "model.zip"),
                 "--test", str(tmp_path / "test.jsonl"), "--out", str(out)]) == 0
    assert out.read_bytes() == (run_dir / "predictions.csv").read_bytes()


def test_corrupt_checkpoint_exit_code(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.zip"
    bad.write_bytes((run_dir / "model.zip").read_bytes()[:200])
    code = main(["eval", "--checkpoint", str(bad),
                 "--test", str(run_dir / "dataset" / "test_grass.jsonl"),
                 "--out", str(tmp_path / "p.csv")])
    assert code == 1
    assert "format version 1" in capsys.readouterr().err


def test_tampered_predictions_rejected_by_report(run_dir, tmp_path, capsys):
    import shutil

    for name in ("predictions.csv", "predictions.csv.provenance.json"):
        shutil.copy(run_dir / name, tmp_path / name)
    pred = tmp_path / "predictions.csv"
    pred.write_text(pred.read_text() + "x:0,grass,1,0.5,0.5\n")
    assert main(["report", "--predictions", str(pred), "--out", str(tmp_path / "r")]) == 1


def test_missing_inputs_are_usage_errors(tmp_path):
    assert main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path / "m.zip")]) == 2
    assert main(["report", "--predictions", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "r")]) == 2
