"""Training and evaluation loops, optimizers, metrics, checkpoints.

All randomness is derived from seeds keyed on (seed, epoch, purpose), never
from global state, so a run is fully determined by its configuration and a
checkpoint resume continues the exact same stream the uninterrupted run would
have used.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .augment import AutoAugConfig, apply_policy, sample_epoch_policy
from .data import Dataset, Episode, sample_episode
from .losses import MarginConfig, hybrid_loss
from .model import ConvT, ConvTConfig, StageParams
from .tensor import NonFiniteError, Tensor, backward, no_grad

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "EvalProtocol",
    "EvalResult",
    "TrainResult",
    "TrainingDiverged",
    "CheckpointError",
    "Checkpoint",
    "train",
    "evaluate",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "write_metrics_csv",
    "read_metrics_csv",
    "METRICS_HEADER",
    "training_accuracy",
    "run_benchmark",
    "run_ablation",
]

OPTIMIZERS = ("adam", "sgd_momentum")

# rng purpose tags; combined with (seed, epoch) into independent streams
_RNG_NOISE = 1
_RNG_SHUFFLE = 2
_RNG_EVAL = 3
_RNG_EPISODE = 4


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int | None = None  # None: full support set if <= 64, else 32
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    margins: MarginConfig = field(default_factory=MarginConfig)
    aug: AutoAugConfig | None = field(default_factory=AutoAugConfig)
    use_triplet: bool = True  # False forces the triplet term to zero
    precision: str = "float32"  # training dtype; correctness tests use float64

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        self.margins.validate()
        if self.aug is not None:
            self.aug.validate()


@dataclass
class MetricsRecord:
    epoch: int
    ce_loss: float
    triplet_loss: float
    total_loss: float
    train_accuracy: float
    aug_gate: bool
    wall_ms: float


METRICS_HEADER = ["epoch", "ce_loss", "triplet_loss", "total_loss", "train_accuracy", "aug_gate", "wall_ms"]


@dataclass
class TrainResult:
    model: ConvT
    records: list[MetricsRecord]
    optimizer_state: dict[str, np.ndarray]
    step: int


def _resolve_batch_size(cfg: TrainConfig, n: int) -> int:
    if cfg.batch_size is not None:
        return min(cfg.batch_size, n)
    return n if n <= 64 else 32


def _extract_train_arrays(train_data):
    if isinstance(train_data, Dataset):
        return train_data.images, train_data.labels
    if isinstance(train_data, Episode):
        return train_data.support_images, train_data.support_labels
    images, labels = train_data
    return np.asarray(images), np.asarray(labels)


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[Tensor, np.ndarray],
    state: dict,
    cfg: TrainConfig,
    step: int,
):
    """Apply one in-place update; returns (params, state) for chaining.

    sgd_momentum: v <- mu*v + g; p <- p - lr*(v + wd*p).
    adam: bias-corrected first/second moments, then p <- p - lr*(mhat/(sqrt(vhat)+eps) + wd*p).
    """
    lr = cfg.learning_rate
    wd = cfg.weight_decay
    for name, p in params.items():
        g = grads[p]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if cfg.optimizer == "sgd_momentum":
            v = state.setdefault(f"{name}.v", np.zeros_like(p.data))
            v *= cfg.momentum
            v += g
            p.data -= lr * (v + wd * p.data)
        else:  # adam
            b1, b2, eps = 0.9, 0.999, 1e-8
            m = state.setdefault(f"{name}.m", np.zeros_like(p.data))
            v = state.setdefault(f"{name}.v", np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {name} became non-finite after update")
    return params, state


def train(
    model: ConvT,
    train_data,
    cfg: TrainConfig,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    step: int = 0,
) -> TrainResult:
    """Run the epoch loop: sample policy, augment, batch, backprop, update.

    ``train_data`` may be a Dataset, an Episode (its support set is used), or
    an (images, labels) pair. Pass ``start_epoch``/``optimizer_state``/``step``
    from a checkpoint to resume; the continuation is bit-identical to an
    uninterrupted run at the same precision.
    """
    cfg.validate()
    images, labels = _extract_train_arrays(train_data)
    if len(images) == 0:
        raise ValueError("training set is empty")
    model.astype(cfg.precision)
    dtype = model.dtype
    params = model.parameters()
    state = optimizer_state if optimizer_state is not None else {}

    batch = _resolve_batch_size(cfg, len(images))
    mining_enabled = cfg.use_triplet
    if mining_enabled and batch < 3:
        warnings.warn(f"batch size {batch} < 3: triplet mining disabled, triplet loss forced to 0")
        mining_enabled = False

    records: list[MetricsRecord] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        try:
            gate = False
            epoch_images = images
            if cfg.aug is not None:
                policy = sample_epoch_policy(cfg.aug, epoch)
                gate = policy.epoch_gate
                if gate:
                    noise_rng = np.random.default_rng((cfg.aug.seed, epoch, _RNG_NOISE))
                    epoch_images = np.stack([apply_policy(policy, im, noise_rng) for im in images])
            xall = epoch_images.astype(dtype)[:, None, :, :]

            shuffle_rng = np.random.default_rng((cfg.seed, epoch, _RNG_SHUFFLE))
            order = shuffle_rng.permutation(len(images))

            sums = np.zeros(3)
            correct = 0
            for lo in range(0, len(order), batch):
                idx = order[lo : lo + batch]
                xb = xall[idx]
                yb = labels[idx]
                logits, emb = model.forward(xb)
                report = hybrid_loss(logits, emb, yb, cfg.margins, mining_enabled=mining_enabled)
                grads = backward(report.total, params.values())
                step += 1
                optimizer_step(params, grads, state, cfg, step)
                w = len(idx)
                sums += w * np.array(
                    [float(report.cross_entropy), float(report.triplet), float(report.total)]
                )
                correct += int((np.argmax(logits.data, axis=1) == yb).sum())
        except NonFiniteError as err:
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {err}") from err

        n = len(images)
        records.append(
            MetricsRecord(
                epoch=epoch,
                ce_loss=float(sums[0] / n),
                triplet_loss=float(sums[1] / n),
                total_loss=float(sums[2] / n),
                train_accuracy=correct / n,
                aug_gate=gate,
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
        )
    return TrainResult(model=model, records=records, optimizer_state=state, step=step)


def _predict(model: ConvT, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Argmax class indices for [M, H, W] images, in eval mode."""
    preds = []
    x = images.astype(model.dtype)[:, None, :, :]
    with no_grad():
        for lo in range(0, len(x), batch):
            logits, _ = model.forward(x[lo : lo + batch])
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.array([], dtype=np.intp)


def training_accuracy(model: ConvT, train_data) -> float:
    """Accuracy of the current model on its (clean) training images."""
    images, labels = _extract_train_arrays(train_data)
    return float((_predict(model, images) == labels).mean())


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalProtocol:
    n_way: int = 10
    k_shot: int = 10
    q_per_class: int = 15
    repeats: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")


@dataclass
class EvalResult:
    mean: float
    std_err: float
    repeats: int
    accuracies: tuple[float, ...]

    @property
    def dispersion_defined(self) -> bool:
        return self.repeats > 1

    def __str__(self) -> str:
        note = "" if self.dispersion_defined else " (single repeat: dispersion undefined, reported as 0)"
        return f"accuracy {self.mean:.4f} +/- {self.std_err:.4f} SE over {self.repeats} repeats{note}"


def evaluate(
    model: ConvT,
    test_set: Dataset,
    protocol: EvalProtocol,
    head_to_class: Mapping[int, int] | None = None,
) -> EvalResult:
    """Repeat-averaged episodic accuracy of a trained model.

    Each repeat samples an episode from ``test_set`` and classifies its query
    chips by argmax over logits; the support draw only reserves chips so the
    query set matches the episodic protocol. ``head_to_class`` maps model
    output indices to dataset labels when the model was trained on a permuted
    or remapped label set (identity when omitted; see ``remap_dataset`` and
    ``Episode.class_map``). Reports the mean and standard error over repeats.
    Repeats run in parallel when the CONVT_THREADS environment variable is > 1.
    """
    protocol.validate()
    head_map = None
    if head_to_class is not None:
        head_map = np.arange(model.config.num_classes)
        for head, cls in head_to_class.items():
            head_map[head] = cls
    q_avail = min(np.bincount(test_set.labels, minlength=test_set.num_classes).min() - protocol.k_shot,
                  protocol.q_per_class)
    if q_avail < 1:
        raise ValueError(
            f"test set too small for protocol: k_shot {protocol.k_shot} leaves no queries"
        )
    if q_avail < protocol.q_per_class:
        warnings.warn(f"queries per class capped at {q_avail} by availability")

    def one_repeat(r: int) -> float:
        rng = np.random.default_rng((protocol.seed, r, _RNG_EVAL))
        ep = sample_episode(test_set, protocol.n_way, protocol.k_shot, q_avail, rng)
        preds = _predict(model, ep.query_images)
        if head_map is not None:
            preds = head_map[preds]
        truth = np.array([ep.class_map[int(l)] for l in ep.query_labels])
        return float((preds == truth).mean())

    workers = int(os.environ.get("CONVT_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one_repeat, range(protocol.repeats)))
    else:
        accs = [one_repeat(r) for r in range(protocol.repeats)]

    arr = np.array(accs)
    std_err = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    if len(arr) == 1:
        warnings.warn("single evaluation repeat: dispersion undefined, reported as 0")
    return EvalResult(mean=float(arr.mean()), std_err=std_err, repeats=protocol.repeats, accuracies=tuple(accs))


# ---------------------------------------------------------------------------
# metrics csv


def write_metrics_csv(records: list[MetricsRecord], path) -> Path:
    """One row per epoch with a fixed header; floats serialized via repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(
                [r.epoch, repr(r.ce_loss), repr(r.triplet_loss), repr(r.total_loss),
                 repr(r.train_accuracy), int(r.aug_gate), repr(r.wall_ms)]
            )
    return path


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"unexpected metrics header in {path}: {rows[:1]}")
    return [
        MetricsRecord(int(e), float(ce), float(tr), float(to), float(acc), bool(int(g)), float(ms))
        for e, ce, tr, to, acc, g, ms in rows[1:]
    ]


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"CVT1"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or from another format version."""


@dataclass
class Checkpoint:
    version: int
    model_config: ConvTConfig
    train_config: TrainConfig
    epoch: int
    step: int
    params: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    extra: dict


def _config_to_json(model_config, train_config, epoch, step, dtype, extra) -> bytes:
    def clean(obj):
        d = asdict(obj)
        return d

    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": clean(model_config),
        "train_config": clean(train_config) if train_config is not None else None,
        "epoch": epoch,
        "step": step,
        "dtype": str(np.dtype(dtype)),
        "extra": extra or {},
    }
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_block(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, nlen).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code} for block {name}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
    return name, arr.astype(dtype).reshape(shape)


def save_checkpoint(
    path,
    model: ConvT,
    train_config: TrainConfig | None = None,
    epoch: int = 0,
    optimizer_state: dict | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> Path:
    """Binary snapshot: magic, version, config JSON, named parameter blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_bytes = _config_to_json(model.config, train_config, epoch, step, model.dtype, extra)
    params = model.parameters()
    opt = optimizer_state or {}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params) + len(opt)))
        for name, t in params.items():
            _write_block(fh, name, t.data)
        for name in sorted(opt):
            _write_block(fh, f"opt:{name}", opt[name])
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r} in {path}; not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint format version {version} unsupported (want {CHECKPOINT_VERSION})")
        (clen,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, clen).decode("utf-8"))
        (nblocks,) = struct.unpack("<I", _read_exact(fh, 4))
        params: dict[str, np.ndarray] = {}
        opt: dict[str, np.ndarray] = {}
        for _ in range(nblocks):
            name, arr = _read_block(fh)
            if name.startswith("opt:"):
                opt[name[4:]] = arr
            else:
                params[name] = arr

    mc = meta["model_config"]
    model_config = ConvTConfig(
        input_size=tuple(mc["input_size"]),
        in_channels=mc["in_channels"],
        num_classes=mc["num_classes"],
        patch_size=mc["patch_size"],
        stages=tuple(
            StageParams(
                out_channels=s["out_channels"],
                kernel=tuple(s["kernel"]),
                stride=s["stride"],
                num_heads=s["num_heads"],
                num_encoder_blocks=s["num_encoder_blocks"],
            )
            for s in mc["stages"]
        ),
        mlp_ratio=mc["mlp_ratio"],
        seed=mc["seed"],
    )
    tc = meta.get("train_config")
    train_config = None
    if tc is not None:
        train_config = TrainConfig(
            epochs=tc["epochs"],
            batch_size=tc["batch_size"],
            learning_rate=tc["learning_rate"],
            optimizer=tc["optimizer"],
            momentum=tc["momentum"],
            weight_decay=tc["weight_decay"],
            seed=tc["seed"],
            margins=MarginConfig(**tc["margins"]),
            aug=AutoAugConfig(**tc["aug"]) if tc["aug"] is not None else None,
            use_triplet=tc.get("use_triplet", True),
            precision=tc["precision"],
        )
    return Checkpoint(
        version=meta["version"],
        model_config=model_config,
        train_config=train_config,
        epoch=meta["epoch"],
        step=meta["step"],
        params=params,
        optimizer_state=opt,
        extra=meta.get("extra", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> ConvT:
    dtype = ckpt.params[next(iter(ckpt.params))].dtype if ckpt.params else np.float64
    model = ConvT(ckpt.model_config, dtype=str(dtype))
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise CheckpointError(
            f"checkpoint parameters do not match model: missing {set(params) ^ set(ckpt.params)}"
        )
    for name, arr in ckpt.params.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {params[name].data.shape} vs {arr.shape}")
        params[name].data = arr.copy()
    return model


# ---------------------------------------------------------------------------
# experiment harnesses


def run_benchmark(
    train_set: Dataset,
    test_set: Dataset,
    model_config: ConvTConfig,
    train_cfg: TrainConfig,
    protocol: EvalProtocol,
    retrain_per_repeat: bool = True,
):
    """Per-repeat retraining protocol: each repeat draws a fresh support
    set, trains a fresh model on it, then scores one query episode from the
    test set.

    With ``retrain_per_repeat`` False this degenerates to a single training
    followed by :func:`evaluate`.
    """
    if not retrain_per_repeat:
        model = ConvT(model_config, dtype=train_cfg.precision)
        support_rng = np.random.default_rng((train_cfg.seed, 0, _RNG_EPISODE))
        episode = sample_episode(train_set, protocol.n_way, protocol.k_shot, 1, support_rng)
        result = train(model, episode, train_cfg)
        return evaluate(model, test_set, protocol, head_to_class=episode.class_map), [result]

    accs = []
    results = []
    for r in range(protocol.repeats):
        rng = np.random.default_rng((train_cfg.seed, r, _RNG_EPISODE))
        episode = sample_episode(train_set, protocol.n_way, protocol.k_shot, 1, rng)
        model = ConvT(replace(model_config, seed=model_config.seed + r), dtype=train_cfg.precision)
        result = train(model, episode, train_cfg)
        results.append(result)
        single = replace(protocol, repeats=1, seed=protocol.seed + r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            accs.append(evaluate(model, test_set, single, head_to_class=episode.class_map).mean)
    arr = np.array(accs)
    std_err = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return (
        EvalResult(mean=float(arr.mean()), std_err=std_err, repeats=len(accs), accuracies=tuple(accs)),
        results,
    )


ABLATION_VARIANTS = ("ce_only", "hybrid", "hybrid_aug")


def run_ablation(
    train_data,
    test_set: Dataset,
    model_config: ConvTConfig,
    base_cfg: TrainConfig,
    protocol: EvalProtocol,
) -> list[dict]:
    """Three-way loss/augmentation comparison on one support set.

    Returns one row per variant: CE-only (margins and triplets off, no
    augmentation), hybrid loss without augmentation, and hybrid loss with
    augmentation. No accuracy ordering is asserted anywhere; the rows are a
    report for inspection.
    """
    variants = {
        "ce_only": replace(
            base_cfg,
            margins=replace(base_cfg.margins, lm_margin=0.0),
            use_triplet=False,
            aug=None,
        ),
        "hybrid": replace(base_cfg, aug=None),
        "hybrid_aug": base_cfg if base_cfg.aug is not None else replace(base_cfg, aug=AutoAugConfig()),
    }
    rows = []
    for name in ABLATION_VARIANTS:
        cfg = variants[name]
        model = ConvT(model_config, dtype=cfg.precision)
        result = train(model, train_data, cfg)
        ev = evaluate(model, test_set, protocol)
        last = result.records[-1]
        rows.append(
            {
                "variant": name,
                "final_train_accuracy": training_accuracy(model, train_data),
                "final_ce_loss": last.ce_loss,
                "final_triplet_loss": last.triplet_loss,
                "eval_mean": ev.mean,
                "eval_std_err": ev.std_err,
                "repeats": ev.repeats,
            }
        )
    return rows
