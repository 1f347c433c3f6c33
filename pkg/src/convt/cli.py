"""Command-line entry point for offline experiments.

Subcommands: synth-gen, train, eval, gradcheck, augment-preview, report.
Every run writes a manifest with the fully resolved configuration before it
starts, so a run can be reproduced from its output directory alone.

Configuration precedence: built-in defaults < config file (--config, simple
``key = value`` lines keyed by flag name) < explicit command-line flags. The
CONVT_THREADS environment variable caps evaluation-repeat parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import AutoAugConfig, apply_policy, sample_epoch_policy
from .data import (
    SynthConfig,
    load_chip_dataset,
    remap_dataset,
    sample_support,
    save_chip_dataset,
    synth_generate,
    synth_protocol_splits,
)
from .gradcheck import OP_CHECKS, run_all
from .losses import MarginConfig
from .model import ConvT, default_config
from .trainer import (
    EvalProtocol,
    TrainConfig,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    run_ablation,
    run_benchmark,
    save_checkpoint,
    train,
    training_accuracy,
    write_metrics_csv,
)

USAGE_ERROR = 2


class UsageError(Exception):
    """Bad flag combination or config-file contents (exit code 2)."""


def _opt(parser, name, typ, default, help_text, **kw):
    parser.add_argument(name, type=typ, default=None, help=f"{help_text} (default: {default})", **kw)
    return name.lstrip("-").replace("-", "_"), default


def _flag(parser, name, default, help_text):
    parser.add_argument(name, action="store_const", const=True, default=None,
                        help=f"{help_text} (default: {default})")
    return name.lstrip("-").replace("-", "_"), default


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, dict]]:
    parser = argparse.ArgumentParser(
        prog="convt",
        description="Few-shot recognition experiments on speckled image chips.",
        epilog="Set CONVT_THREADS to run evaluation repeats in parallel.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    defaults: dict[str, dict] = {}

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None,
                       help="key = value file applied between defaults and flags")
        defaults[name] = {}
        return p

    def reg(p, cmd, *entries):
        for key, default in entries:
            defaults[cmd][key] = default

    p = sub("synth-gen", "render a synthetic speckled chip directory")
    reg(p, "synth-gen",
        _opt(p, "--out", str, None, "output chip directory"),
        _opt(p, "--classes", int, 10, "number of shape classes"),
        _opt(p, "--per-class", int, 40, "chips per class"),
        _opt(p, "--chip-size", int, 64, "chip side in pixels"),
        _opt(p, "--speckle-shape", float, 4.0, "Gamma shape of the speckle (inf disables)"),
        _opt(p, "--pose-min", float, 0.0, "low end of the pose range in degrees"),
        _opt(p, "--pose-max", float, 360.0, "high end of the pose range in degrees"),
        _opt(p, "--seed", int, 0, "generator seed"))

    p = sub("train", "train a model on k chips per class from a chip directory")
    reg(p, "train",
        _opt(p, "--data", str, None, "chip directory with one subdirectory per class"),
        _opt(p, "--out", str, None, "run output directory"),
        _opt(p, "--n-way", int, 0, "classes to train on (0 = all in --data)"),
        _opt(p, "--k-shot", int, 10, "support chips per class"),
        _opt(p, "--epochs", int, 200, "training epochs"),
        _opt(p, "--lr", float, 3e-4, "learning rate"),
        _opt(p, "--batch", int, 0, "batch size (0 = auto: full set if <= 64 else 32)"),
        _opt(p, "--optimizer", str, "adam", "adam or sgd_momentum"),
        _opt(p, "--lm-margin", float, 0.35, "true-class logit margin"),
        _opt(p, "--triplet-margin", float, 0.3, "triplet hinge margin"),
        _opt(p, "--aug-k", int, 0, "transforms drawn per epoch (0 = 5 if k_shot <= 2 else 3)"),
        _opt(p, "--aug-d", float, 3.0, "global distortion magnitude, 0..10"),
        _flag(p, "--no-aug", False, "disable epoch-level augmentation"),
        _opt(p, "--precision", str, "float32", "float32 or float64"),
        _opt(p, "--seed", int, 0, "training seed"))

    p = sub("eval", "episodic evaluation of a trained checkpoint")
    reg(p, "eval",
        _opt(p, "--data", str, None, "test chip directory"),
        _opt(p, "--out", str, None, "run directory holding model.cvt; eval outputs land here"),
        _opt(p, "--checkpoint", str, "", "checkpoint path (default: <out>/model.cvt)"),
        _opt(p, "--n-way", int, 0, "episode way count (0 = all trained classes)"),
        _opt(p, "--k-shot", int, 10, "support chips reserved per class"),
        _opt(p, "--queries", int, 15, "query chips per class (capped by availability)"),
        _opt(p, "--repeats", int, 20, "evaluation repeats"),
        _flag(p, "--retrain", False, "retrain a fresh model on a fresh support draw for every repeat"),
        _opt(p, "--train-data", str, "", "support chip directory for --retrain (default: --data)"),
        _opt(p, "--seed", int, 0, "evaluation seed"))

    p = sub("gradcheck", "finite-difference check of gradients")
    reg(p, "gradcheck",
        _opt(p, "--ops", str, "all", f"comma list from {','.join(sorted(OP_CHECKS))},composite or 'all'"),
        _opt(p, "--samples", int, 40, "sampled coordinates per op"),
        _opt(p, "--composite-samples", int, 200, "sampled coordinates for the composite"),
        _opt(p, "--seed", int, 0, "sampling seed"))

    p = sub("augment-preview", "write before/after chips for sampled policies")
    reg(p, "augment-preview",
        _opt(p, "--out", str, None, "output directory for PNG pairs"),
        _opt(p, "--data", str, "", "chip directory to draw the example chip from (default: synthetic)"),
        _opt(p, "--policies", int, 5, "number of epoch policies to preview"),
        _opt(p, "--aug-k", int, 3, "transforms drawn per epoch"),
        _opt(p, "--aug-d", float, 3.0, "global distortion magnitude, 0..10"),
        _opt(p, "--seed", int, 0, "policy seed"))

    p = sub("report", "render figures from run outputs (and run the ablation)")
    reg(p, "report",
        _opt(p, "--metrics", str, "", "metrics CSV to plot"),
        _opt(p, "--out", str, None, "directory for rendered figures"),
        _flag(p, "--ablation", False, "run the CE-only / hybrid / hybrid+aug comparison"),
        _opt(p, "--epochs", int, 60, "training epochs per ablation variant"),
        _opt(p, "--k-shot", int, 10, "support chips per class for the ablation"),
        _opt(p, "--queries", int, 10, "query chips per class for the ablation"),
        _opt(p, "--repeats", int, 5, "evaluation repeats for the ablation"),
        _opt(p, "--seed", int, 0, "ablation seed"))

    return parser, defaults


def _load_config_file(path: str, allowed: dict) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config {path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in allowed:
            raise UsageError(f"config {path}:{lineno}: unknown key {key!r} for this command")
        default = allowed[key]
        val = val.strip()
        if isinstance(default, bool):
            values[key] = val.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int) and not isinstance(default, bool):
            values[key] = int(val)
        elif isinstance(default, float):
            values[key] = float(val)
        else:
            values[key] = val
    return values


def _resolve(args, defaults: dict) -> dict:
    file_values = {}
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config, defaults)
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else file_values.get(key, default)
    return resolved


class Manifest:
    """Run record written before work starts and finalized afterwards."""

    def __init__(self, out_dir: Path, command: str, config: dict):
        self.path = Path(out_dir) / "run_manifest.json"
        self.payload = {
            "command": command,
            "config": config,
            "seeds": {k: v for k, v in config.items() if "seed" in k},
            "out_dir": str(out_dir),
            "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "end_time": None,
        }
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.payload, indent=2, sort_keys=True) + "\n")

    def finish(self):
        self.payload["end_time"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._write()


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg[key] in (None, ""):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_synth_gen(cfg) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    manifest = Manifest(out, "synth-gen", cfg)
    ds = synth_generate(
        SynthConfig(
            num_classes=cfg["classes"],
            chips_per_class=cfg["per_class"],
            chip_size=cfg["chip_size"],
            speckle_shape=cfg["speckle_shape"],
            pose_range=(cfg["pose_min"], cfg["pose_max"]),
            seed=cfg["seed"],
        )
    )
    save_chip_dataset(ds, out)
    manifest.finish()
    print(f"wrote {len(ds)} chips ({ds.num_classes} classes) under {out}")
    return 0


def _train_config_from(cfg) -> TrainConfig:
    aug = None
    if not cfg["no_aug"]:
        k = cfg["aug_k"] or (5 if cfg["k_shot"] <= 2 else 3)
        aug = AutoAugConfig(ops_per_epoch=k, distortion=cfg["aug_d"], seed=cfg["seed"])
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"] or None,
        learning_rate=cfg["lr"],
        optimizer=cfg["optimizer"],
        seed=cfg["seed"],
        margins=MarginConfig(lm_margin=cfg["lm_margin"], triplet_margin=cfg["triplet_margin"]),
        aug=aug,
        precision=cfg["precision"],
    )


def _cmd_train(cfg) -> int:
    _require(cfg, "data", "out")
    out = Path(cfg["out"])
    manifest = Manifest(out, "train", cfg)
    ds = load_chip_dataset(cfg["data"])
    n_way = cfg["n_way"] or ds.num_classes
    rng = np.random.default_rng((cfg["seed"], 4))
    images, labels, class_names = sample_support(ds, n_way, cfg["k_shot"], rng)

    train_cfg = _train_config_from(cfg)
    model = ConvT(default_config(num_classes=n_way, input_size=ds.chip_size, seed=cfg["seed"]),
                  dtype=train_cfg.precision)
    result = train(model, (images, labels), train_cfg)

    write_metrics_csv(result.records, out / "metrics.csv")
    save_checkpoint(
        out / "model.cvt",
        model,
        train_cfg,
        epoch=train_cfg.epochs,
        optimizer_state=result.optimizer_state,
        step=result.step,
        extra={"class_names": class_names},
    )
    manifest.finish()
    last = result.records[-1]
    clean_acc = training_accuracy(model, (images, labels))
    print(
        f"trained {train_cfg.epochs} epochs on {len(images)} chips: "
        f"final loss {last.total_loss:.4f}, clean train accuracy {clean_acc:.4f}"
    )
    print(f"metrics: {out / 'metrics.csv'}\ncheckpoint: {out / 'model.cvt'}")
    return 0


def _cmd_eval(cfg) -> int:
    _require(cfg, "data", "out")
    out = Path(cfg["out"])
    ckpt_path = Path(cfg["checkpoint"] or out / "model.cvt")
    manifest = Manifest(out, "eval", cfg)
    ckpt = load_checkpoint(ckpt_path)
    class_names = ckpt.extra.get("class_names")
    test_ds = load_chip_dataset(cfg["data"])
    if class_names:
        test_ds = remap_dataset(test_ds, class_names)
    n_way = cfg["n_way"] or test_ds.num_classes
    protocol = EvalProtocol(
        n_way=n_way, k_shot=cfg["k_shot"], q_per_class=cfg["queries"],
        repeats=cfg["repeats"], seed=cfg["seed"],
    )

    if cfg["retrain"]:
        train_ds = load_chip_dataset(cfg["train_data"] or cfg["data"])
        if class_names:
            train_ds = remap_dataset(train_ds, class_names)
        if ckpt.train_config is None:
            raise SystemExit("checkpoint carries no training configuration for --retrain")
        result, _ = run_benchmark(train_ds, test_ds, ckpt.model_config, ckpt.train_config, protocol)
    else:
        model = model_from_checkpoint(ckpt)
        result = evaluate(model, test_ds, protocol)

    payload = {
        "mean": result.mean,
        "std_err": result.std_err,
        "repeats": result.repeats,
        "accuracies": list(result.accuracies),
        "dispersion": "standard error over repeats",
    }
    (out / "eval.json").write_text(json.dumps(payload, indent=2) + "\n")
    manifest.finish()
    print(str(result))
    print(f"details: {out / 'eval.json'}")
    return 0


def _cmd_gradcheck(cfg) -> int:
    names = None if cfg["ops"] == "all" else [s.strip() for s in cfg["ops"].split(",") if s.strip()]
    reports = run_all(names, seed=cfg["seed"], num_samples=cfg["samples"],
                      composite_samples=cfg["composite_samples"])
    width = max(len(n) for n in reports)
    ok = True
    for name, rep in reports.items():
        status = "pass" if rep.passed else "FAIL"
        print(f"{name:<{width}}  max rel err {rep.max_rel_error:.3e}  "
              f"({rep.num_checked} coords)  {status}")
        ok &= rep.passed
    return 0 if ok else 1


def _save_png(path: Path, chip: np.ndarray):
    Image.fromarray(np.clip(np.round(chip * 255.0), 0, 255).astype(np.uint8), mode="L").save(path)


def _cmd_augment_preview(cfg) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    manifest = Manifest(out, "augment-preview", cfg)
    if cfg["data"]:
        chip = load_chip_dataset(cfg["data"]).images[0]
    else:
        chip = synth_generate(SynthConfig(chips_per_class=1, seed=cfg["seed"])).images[0]
    aug = AutoAugConfig(ops_per_epoch=cfg["aug_k"], distortion=cfg["aug_d"], seed=cfg["seed"])

    _save_png(out / "before.png", chip)
    lines = []
    for epoch in range(cfg["policies"]):
        policy = sample_epoch_policy(aug, epoch)
        after = apply_policy(policy, chip)
        _save_png(out / f"after_epoch{epoch:03d}.png", after)
        applied = [n for n, g in zip(policy.chosen, policy.gates) if g] if policy.epoch_gate else []
        lines.append(
            f"epoch {epoch}: gate={int(policy.epoch_gate)} chosen={','.join(policy.chosen)} "
            f"applied={','.join(applied) or '-'} magnitude={policy.magnitudes[0]:g}"
        )
    (out / "policies.txt").write_text("\n".join(lines) + "\n")
    manifest.finish()
    print(f"wrote before.png and {cfg['policies']} after-chips under {out}")
    return 0


def _cmd_report(cfg) -> int:
    from .report import render_ablation, render_training_curves, write_ablation_csv

    _require(cfg, "out")
    out = Path(cfg["out"])
    manifest = Manifest(out, "report", cfg)
    wrote = []
    if cfg["metrics"]:
        wrote += render_training_curves(cfg["metrics"], out)
    if cfg["ablation"]:
        train_ds, test_ds = synth_protocol_splits(
            SynthConfig(chips_per_class=max(cfg["k_shot"] + cfg["queries"], 25), seed=cfg["seed"])
        )
        rng = np.random.default_rng((cfg["seed"], 4))
        images, labels, _ = sample_support(train_ds, train_ds.num_classes, cfg["k_shot"], rng)
        base = TrainConfig(epochs=cfg["epochs"], seed=cfg["seed"])
        protocol = EvalProtocol(
            n_way=test_ds.num_classes, k_shot=1, q_per_class=cfg["queries"],
            repeats=cfg["repeats"], seed=cfg["seed"],
        )
        rows = run_ablation(
            (images, labels), test_ds,
            default_config(num_classes=train_ds.num_classes, seed=cfg["seed"]),
            base, protocol,
        )
        wrote.append(write_ablation_csv(rows, out / "ablation.csv"))
        wrote.append(render_ablation(rows, out / "ablation.png"))
    if not wrote:
        raise UsageError("nothing to do: pass --metrics and/or --ablation")
    manifest.finish()
    for p in wrote:
        print(f"wrote {p}")
    return 0


_COMMANDS = {
    "synth-gen": _cmd_synth_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "augment-preview": _cmd_augment_preview,
    "report": _cmd_report,
}


def dispatch(argv=None) -> int:
    parser, defaults = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:  # argparse exits on usage errors and --help
        return int(err.code or 0)
    try:
        cfg = _resolve(args, defaults[args.command])
        return _COMMANDS[args.command](cfg)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
