"""Chip datasets: directory loader, synthetic speckled generator, episodes.

The synthetic generator is the stand-in test bed: each class is a distinct
parametric bright shape rendered at a random pose on a dark background, then
multiplied by mean-one Gamma speckle. Disjoint pose ranges between a training
and a test dataset mimic the viewpoint gap of a real acquisition protocol.

Real chips drop in through ``load_chip_dataset``, which reads a directory of
class subfolders of 8-bit grayscale images.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import gaussian_blur

__all__ = [
    "Dataset",
    "Episode",
    "SynthConfig",
    "synth_generate",
    "synth_protocol_splits",
    "load_chip_dataset",
    "save_chip_dataset",
    "sample_episode",
    "remap_dataset",
    "CLASS_SHAPE_NAMES",
]


@dataclass
class Dataset:
    images: np.ndarray  # [M, H, W] floats in [0, 1]
    labels: np.ndarray  # [M] ints, dense in [0, num_classes)
    poses: np.ndarray  # [M] degrees (0 when unknown)
    class_names: list[str]
    source: str = "synthetic"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be [M, H, W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.poses) != len(self.images):
            raise ValueError("images, labels and poses must have equal length")
        if len(self.labels):
            present = np.unique(self.labels)
            expected = np.arange(len(self.class_names))
            if not np.array_equal(present, expected):
                raise ValueError(
                    f"labels must be dense over {len(self.class_names)} classes, found {present}"
                )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def chip_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass
class Episode:
    """One N-way K-shot task with episode-local labels 0..N-1."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: dict[int, int]  # episode label -> dataset label
    support_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    query_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))

    @property
    def n_way(self) -> int:
        return len(self.class_map)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 10
    chips_per_class: int = 40
    chip_size: int = 64
    speckle_shape: float = 4.0  # Gamma shape; inf disables the noise
    pose_range: tuple[float, float] = (0.0, 360.0)
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(_SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(_SHAPES)}], got {self.num_classes}")
        if self.chips_per_class < 1:
            raise ValueError(f"chips_per_class must be >= 1, got {self.chips_per_class}")
        if self.chip_size < 16:
            raise ValueError(f"chip_size must be >= 16, got {self.chip_size}")
        if not self.speckle_shape > 0:
            raise ValueError(f"speckle_shape must be > 0, got {self.speckle_shape}")
        if self.pose_range[1] < self.pose_range[0]:
            raise ValueError(f"pose_range must be (low, high), got {self.pose_range}")


def _disk(u, v, cu, cv, r):
    return ((u - cu) ** 2 + (v - cv) ** 2 <= r * r).astype(np.float64)


def _box(u, v, hu, hv, cu=0.0, cv=0.0):
    return ((np.abs(u - cu) <= hu) & (np.abs(v - cv) <= hv)).astype(np.float64)


def _shape_ellipse(u, v):
    return ((u / 0.55) ** 2 + (v / 0.28) ** 2 <= 1.0).astype(np.float64)


def _shape_bar(u, v):
    return _box(u, v, 0.55, 0.09)


def _shape_double_bar(u, v):
    return np.maximum(_box(u, v, 0.5, 0.08, cv=0.22), _box(u, v, 0.5, 0.08, cv=-0.22))


def _shape_hollow_rect(u, v):
    outer = _box(u, v, 0.5, 0.36)
    inner = _box(u, v, 0.34, 0.2)
    return np.clip(outer - inner, 0.0, 1.0)


def _shape_solid_rect(u, v):
    return _box(u, v, 0.36, 0.22)


def _shape_cross(u, v):
    return np.maximum(_box(u, v, 0.52, 0.1), _box(u, v, 0.1, 0.52))


def _shape_dotted_ellipse(u, v):
    ring = (np.abs(np.sqrt((u / 0.55) ** 2 + (v / 0.3) ** 2) - 1.0) <= 0.14).astype(np.float64)
    return np.maximum(ring, _disk(u, v, 0.0, 0.0, 0.14))


def _shape_three_dots(u, v):
    out = _disk(u, v, -0.42, 0.0, 0.13)
    out = np.maximum(out, _disk(u, v, 0.0, 0.0, 0.13))
    return np.maximum(out, _disk(u, v, 0.42, 0.0, 0.13))


def _shape_tee(u, v):
    # mirror-symmetric: flips land on a rotated pose of the same class
    return np.maximum(_box(u, v, 0.48, 0.1, cv=-0.3), _box(u, v, 0.1, 0.32, cv=0.1))


def _shape_ring(u, v):
    r = np.sqrt(u * u + v * v)
    return ((r >= 0.3) & (r <= 0.46)).astype(np.float64)


_SHAPES = (
    _shape_ellipse,
    _shape_bar,
    _shape_double_bar,
    _shape_hollow_rect,
    _shape_solid_rect,
    _shape_cross,
    _shape_dotted_ellipse,
    _shape_three_dots,
    _shape_tee,
    _shape_ring,
)

CLASS_SHAPE_NAMES = (
    "00_ellipse",
    "01_bar",
    "02_double_bar",
    "03_hollow_rect",
    "04_solid_rect",
    "05_cross",
    "06_dotted_ellipse",
    "07_three_dots",
    "08_tee",
    "09_ring",
)

_BACKGROUND = 0.06


def _render_chip(class_id: int, pose_deg: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Noise-free chip: shape at the given pose with small jitter, soft edges."""
    amplitude = rng.uniform(0.62, 0.85)
    scale = rng.uniform(0.9, 1.1)
    du, dv = rng.uniform(-0.06, 0.06, size=2)

    half = (size - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    v0 = (ys - half) / (half * scale) - dv
    u0 = (xs - half) / (half * scale) - du
    th = np.deg2rad(pose_deg)
    u = np.cos(th) * u0 + np.sin(th) * v0
    v = -np.sin(th) * u0 + np.cos(th) * v0

    mask = gaussian_blur(_SHAPES[class_id](u, v), 0.9)
    return np.clip(_BACKGROUND + amplitude * mask, 0.0, 1.0)


def synth_generate(config: SynthConfig) -> Dataset:
    """Render a speckled synthetic dataset; bit-identical for a fixed seed.

    Each chip's pose and jitters come from a stream keyed on (seed, class,
    chip index), with speckle drawn afterwards from the same stream, so the
    noise-free render is unchanged by the speckle setting.
    """
    config.validate()
    size = config.chip_size
    count = config.num_classes * config.chips_per_class
    images = np.empty((count, size, size))
    labels = np.empty(count, dtype=np.int64)
    poses = np.empty(count)
    lo, hi = config.pose_range
    i = 0
    for c in range(config.num_classes):
        for j in range(config.chips_per_class):
            rng = np.random.default_rng((config.seed, c, j))
            pose = rng.uniform(lo, hi)
            chip = _render_chip(c, pose, size, rng)
            if np.isfinite(config.speckle_shape):
                noise = rng.gamma(config.speckle_shape, 1.0 / config.speckle_shape, size=chip.shape)
                chip = np.clip(chip * noise, 0.0, 1.0)
            images[i] = chip
            labels[i] = c
            poses[i] = pose
            i += 1
    return Dataset(
        images=images,
        labels=labels,
        poses=poses,
        class_names=list(CLASS_SHAPE_NAMES[: config.num_classes]),
        source="synthetic",
    )


def synth_protocol_splits(
    config: SynthConfig,
    train_pose: tuple[float, float] = (0.0, 20.0),
    test_pose: tuple[float, float] = (20.0, 40.0),
    test_chips_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Train/test datasets with disjoint pose ranges (viewpoint-gap protocol)."""
    if not (train_pose[1] <= test_pose[0] or test_pose[1] <= train_pose[0]):
        raise ValueError(f"pose ranges overlap: {train_pose} vs {test_pose}")
    train = synth_generate(replace(config, pose_range=train_pose))
    test = synth_generate(
        replace(
            config,
            pose_range=test_pose,
            chips_per_class=test_chips_per_class or config.chips_per_class,
            seed=config.seed + 1,
        )
    )
    return train, test


# ---------------------------------------------------------------------------
# directory loader / saver


def _fit_to(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Center-crop then zero-pad a chip to the target size."""
    th, tw = target
    h, w = img.shape
    if h > th:
        top = (h - th) // 2
        img = img[top : top + th]
    if w > tw:
        left = (w - tw) // 2
        img = img[:, left : left + tw]
    h, w = img.shape
    if h < th or w < tw:
        pt, pl = (th - h) // 2, (tw - w) // 2
        img = np.pad(img, ((pt, th - h - pt), (pl, tw - w - pl)))
    return img


def load_chip_dataset(root) -> Dataset:
    """Read ``root/<class_name>/<chip>.png`` (or .pgm) as a labeled dataset.

    Labels follow the sorted class-directory names. Off-size chips are
    center-cropped/zero-padded to the modal size with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"chip directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class subdirectories under {root}")

    raw: list[tuple[np.ndarray, int]] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise FileNotFoundError(f"no .png/.pgm chips in class directory {cdir}")
        for path in files:
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            except OSError as err:
                raise OSError(f"unreadable chip file {path}: {err}") from err
            raw.append((arr, label))

    sizes = Counter(img.shape for img, _ in raw)
    modal = max(sizes, key=lambda s: (sizes[s], s))
    images = []
    for img, _ in raw:
        if img.shape != modal:
            warnings.warn(
                f"chip size {img.shape} differs from modal {modal}; center-cropping/padding",
                stacklevel=2,
            )
            img = _fit_to(img, modal)
        images.append(img)

    return Dataset(
        images=np.stack(images),
        labels=np.array([lab for _, lab in raw], dtype=np.int64),
        poses=np.zeros(len(raw)),
        class_names=[d.name for d in class_dirs],
        source="directory",
    )


def save_chip_dataset(ds: Dataset, root) -> Path:
    """Write a dataset as 8-bit grayscale PNGs in the loader's layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for label, name in enumerate(ds.class_names):
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        for k, idx in enumerate(ds.class_indices(label)):
            img = np.clip(np.round(ds.images[idx] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img, mode="L").save(cdir / f"chip_{k:05d}.png")
    return root


def remap_dataset(ds: Dataset, class_names: list[str]) -> Dataset:
    """Restrict a dataset to ``class_names`` and relabel to their positions."""
    missing = [n for n in class_names if n not in ds.class_names]
    if missing:
        raise ValueError(f"dataset lacks classes {missing}; has {ds.class_names}")
    old_to_new = {ds.class_names.index(n): i for i, n in enumerate(class_names)}
    keep = np.isin(ds.labels, list(old_to_new))
    labels = np.array([old_to_new[int(l)] for l in ds.labels[keep]], dtype=np.int64)
    return Dataset(
        images=ds.images[keep],
        labels=labels,
        poses=ds.poses[keep],
        class_names=list(class_names),
        source=ds.source,
    )


# ---------------------------------------------------------------------------
# episodic sampling


def sample_support(
    ds: Dataset,
    n_way: int,
    k_shot: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Draw k chips per class for training, with no query reservation.

    Returns (images, labels, class_names) where labels run 0..n_way-1 in the
    class draw order and class_names records which dataset class each label
    denotes.
    """
    if n_way < 2 or n_way > ds.num_classes:
        raise ValueError(f"n_way must be in [2, {ds.num_classes}], got {n_way}")
    chosen = rng.choice(ds.num_classes, size=n_way, replace=False)
    images, labels, names = [], [], []
    for new_label, ds_label in enumerate(int(c) for c in chosen):
        pool = ds.class_indices(ds_label)
        if len(pool) < k_shot:
            raise ValueError(
                f"class {ds.class_names[ds_label]!r} has {len(pool)} chips, needs {k_shot}"
            )
        picks = rng.choice(pool, size=k_shot, replace=False)
        images.append(ds.images[picks])
        labels.extend([new_label] * k_shot)
        names.append(ds.class_names[ds_label])
    return np.concatenate(images), np.array(labels, dtype=np.int64), names


def sample_episode(
    ds: Dataset,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an N-way K-shot episode with disjoint support and query sets.

    Classes are drawn without replacement; within each class, support then
    query chips are drawn without replacement. Episode-local labels follow
    the class draw order.
    """
    if n_way < 2 or n_way > ds.num_classes:
        raise ValueError(f"n_way must be in [2, {ds.num_classes}], got {n_way}")
    if k_shot < 1 or q_per_class < 1:
        raise ValueError(f"k_shot and q_per_class must be >= 1, got {k_shot}, {q_per_class}")
    chosen = rng.choice(ds.num_classes, size=n_way, replace=False)

    sup_idx, qry_idx, sup_lab, qry_lab = [], [], [], []
    class_map = {}
    for epi_label, ds_label in enumerate(int(c) for c in chosen):
        pool = ds.class_indices(ds_label)
        need = k_shot + q_per_class
        if len(pool) < need:
            raise ValueError(
                f"class {ds.class_names[ds_label]!r} has {len(pool)} chips, "
                f"needs {need} (k_shot {k_shot} + queries {q_per_class})"
            )
        picks = rng.choice(pool, size=need, replace=False)
        sup_idx.extend(picks[:k_shot])
        qry_idx.extend(picks[k_shot:])
        sup_lab.extend([epi_label] * k_shot)
        qry_lab.extend([epi_label] * q_per_class)
        class_map[epi_label] = ds_label

    sup_idx = np.array(sup_idx, dtype=np.int64)
    qry_idx = np.array(qry_idx, dtype=np.int64)
    return Episode(
        support_images=ds.images[sup_idx],
        support_labels=np.array(sup_lab, dtype=np.int64),
        query_images=ds.images[qry_idx],
        query_labels=np.array(qry_lab, dtype=np.int64),
        class_map=class_map,
        support_indices=sup_idx,
        query_indices=qry_idx,
    )
