import json

import numpy as np
import pytest

from convt.cli import build_parser, dispatch
from convt.data import load_chip_dataset


def run(argv):
    return dispatch([str(a) for a in argv])


# ---------------------------------------------------------------------------
# synth-gen


def test_synth_gen_writes_chip_directory(tmp_path, capsys):
    out = tmp_path / "chips"
    assert run(["synth-gen", "--classes", 3, "--per-class", 4, "--out", out, "--seed", 1]) == 0
    pngs = list(out.rglob("*.png"))
    assert len(pngs) == 12
    ds = load_chip_dataset(out)
    assert ds.num_classes == 3
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "synth-gen"
    assert manifest["end_time"] is not None
    assert manifest["config"]["classes"] == 3


def test_synth_gen_missing_out_is_usage_error(capsys):
    assert run(["synth-gen", "--classes", 3]) == 2
    assert "out" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train / eval / report pipeline (tiny sizes)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One shared tiny train run: chips + metrics + checkpoint."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "train_chips"
    test_data = root / "test_chips"
    out = root / "run"
    assert run(["synth-gen", "--classes", 3, "--per-class", 6, "--chip-size", 32,
                "--pose-min", 0, "--pose-max", 20, "--out", data, "--seed", 3]) == 0
    assert run(["synth-gen", "--classes", 3, "--per-class", 6, "--chip-size", 32,
                "--pose-min", 20, "--pose-max", 40, "--out", test_data, "--seed", 4]) == 0
    assert run(["train", "--data", data, "--out", out, "--k-shot", 4, "--epochs", 2,
                "--lr", "1e-3", "--seed", 5]) == 0
    return {"data": data, "test_data": test_data, "out": out}


def test_train_outputs(tiny_run):
    out = tiny_run["out"]
    assert (out / "metrics.csv").exists()
    assert (out / "model.cvt").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["k_shot"] == 4
    assert manifest["seeds"] == {"seed": 5}
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,ce_loss,triplet_loss,total_loss,train_accuracy,aug_gate,wall_ms"


def test_eval_reports_mean_and_se(tiny_run, capsys):
    out = tiny_run["out"]
    assert run(["eval", "--data", tiny_run["test_data"], "--out", out,
                "--k-shot", 1, "--queries", 3, "--repeats", 4, "--seed", 6]) == 0
    printed = capsys.readouterr().out
    assert "accuracy" in printed and "+/-" in printed
    payload = json.loads((out / "eval.json").read_text())
    assert payload["repeats"] == 4
    assert len(payload["accuracies"]) == 4
    assert 0.0 <= payload["mean"] <= 1.0


def test_eval_retrain_protocol(tiny_run, capsys):
    out = tiny_run["out"]
    assert run(["eval", "--data", tiny_run["test_data"], "--train-data", tiny_run["data"],
                "--out", out, "--retrain", "--k-shot", 2, "--queries", 2,
                "--repeats", 2, "--seed", 7]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_report_renders_curves(tiny_run):
    out = tiny_run["out"]
    figs = tiny_run["out"] / "figs"
    assert run(["report", "--metrics", out / "metrics.csv", "--out", figs]) == 0
    assert (figs / "loss_curves.png").exists()
    assert (figs / "accuracy_curve.png").exists()


def test_train_missing_data_dir(tmp_path, capsys):
    code = run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "o", "--k-shot", 2])
    assert code == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_single_op(capsys):
    assert run(["gradcheck", "--ops", "softmax,matmul", "--samples", 6]) == 0
    printed = capsys.readouterr().out
    assert "softmax" in printed and "matmul" in printed and "pass" in printed


# ---------------------------------------------------------------------------
# augment-preview


def test_augment_preview_writes_pairs(tmp_path):
    out = tmp_path / "prev"
    assert run(["augment-preview", "--out", out, "--policies", 3, "--seed", 8]) == 0
    assert (out / "before.png").exists()
    for epoch in range(3):
        assert (out / f"after_epoch{epoch:03d}.png").exists()
    assert (out / "policies.txt").read_text().count("epoch") == 3


# ---------------------------------------------------------------------------
# flags / config precedence


def test_unknown_flag_exits_two(capsys):
    assert run(["train", "--bogus-flag", "1"]) == 2


def test_unknown_command_exits_two(capsys):
    assert run(["frobnicate"]) == 2


def test_help_lists_stable_flags(capsys):
    with pytest.raises(SystemExit):
        build_parser()[0].parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--data", "--out", "--seed", "--k-shot", "--epochs", "--lr", "--batch",
                 "--lm-margin", "--triplet-margin", "--aug-k", "--aug-d", "--no-aug", "--config"):
        assert flag in text, flag
    assert "default" in text


def test_help_every_subcommand(capsys):
    for cmd in ("synth-gen", "train", "eval", "gradcheck", "augment-preview", "report"):
        with pytest.raises(SystemExit):
            build_parser()[0].parse_args([cmd, "--help"])
        assert "--config" in capsys.readouterr().out


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("classes = 4\nper-class = 2\nseed = 9\n")
    out = tmp_path / "chips"
    # flag --classes overrides the file; per-class comes from the file
    assert run(["synth-gen", "--config", cfg, "--classes", 2, "--out", out]) == 0
    ds = load_chip_dataset(out)
    assert ds.num_classes == 2
    assert len(ds) == 4
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["seed"] == 9


def test_config_file_unknown_key_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not-a-key = 1\n")
    assert run(["synth-gen", "--config", cfg, "--out", tmp_path / "x"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_config_file_malformed_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just words\n")
    assert run(["synth-gen", "--config", cfg, "--out", tmp_path / "x"]) == 2


def test_manifest_written_before_failure(tmp_path):
    # train against a missing data dir still leaves a manifest with the config
    out = tmp_path / "run"
    run(["train", "--data", tmp_path / "missing", "--out", out, "--k-shot", 2])
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["end_time"] is None
