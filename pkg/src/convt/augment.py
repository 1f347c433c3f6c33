"""Epoch-level stochastic augmentation with gated policy sampling.

Once per training epoch, a standard-normal draw against a threshold decides
whether augmentation runs at all; a second set of draws picks which transforms
from the registry fire (distinct names, one gate each). All gated transforms
share a single global distortion magnitude on a 0..10 scale. The same
(config seed, epoch index) pair always yields the same policy, so training
runs replay identically.

Transforms are pure image -> image kernels on single-channel chips with values
in [0, 1]; every kernel preserves shape and clips back into range. Geometric
kernels use bilinear interpolation with zero fill outside the chip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AutoAugConfig",
    "EpochPolicy",
    "TRANSFORM_ORDER",
    "sample_epoch_policy",
    "apply_policy",
    "policy_space_size",
    "transform",
    "gaussian_blur",
]

# Canonical registry order; sampling draws from the first `num_transforms`.
TRANSFORM_ORDER = (
    "flip_h",
    "flip_v",
    "rotate",
    "translate_x",
    "translate_y",
    "shear_x",
    "shear_y",
    "zoom",
    "brightness",
    "contrast",
    "blur",
    "speckle",
)

MAX_MAGNITUDE = 10.0

# full-scale settings reached at magnitude 10
_MAX_ROTATE_DEG = 30.0
_MAX_TRANSLATE_FRAC = 0.3
_MAX_SHEAR = 0.3
_MAX_ZOOM_SHRINK = 0.3
_MAX_INTENSITY = 0.3
_MAX_BLUR_SIGMA = 1.5
_MIN_SPECKLE_SHAPE = 8.0


@dataclass(frozen=True)
class AutoAugConfig:
    num_transforms: int = 12  # size of the usable transform set
    ops_per_epoch: int = 3  # distinct transforms drawn each epoch
    distortion: float = 3.0  # shared magnitude, 0..10 scale
    epoch_threshold: float = 0.0  # epoch gate fires when draw >= this
    op_threshold: float = 0.0  # per-transform gate threshold
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.num_transforms <= len(TRANSFORM_ORDER):
            raise ValueError(
                f"num_transforms must be in [1, {len(TRANSFORM_ORDER)}], got {self.num_transforms}"
            )
        if not 1 <= self.ops_per_epoch <= self.num_transforms:
            raise ValueError(
                f"ops_per_epoch must be in [1, num_transforms={self.num_transforms}], "
                f"got {self.ops_per_epoch}"
            )
        if self.distortion < 0:
            raise ValueError(f"distortion must be >= 0, got {self.distortion}")


@dataclass(frozen=True)
class EpochPolicy:
    """The sampled augmentation decision for one epoch."""

    epoch_gate: bool
    chosen: tuple[str, ...]
    gates: tuple[bool, ...]
    magnitudes: tuple[float, ...]
    noise_seed: int  # seeds stochastic kernels when the caller passes no rng


def sample_epoch_policy(config: AutoAugConfig, epoch: int) -> EpochPolicy:
    """Draw the policy for one epoch; a pure function of (config, epoch)."""
    config.validate()
    rng = np.random.default_rng((config.seed, int(epoch)))
    epoch_gate = bool(rng.standard_normal() >= config.epoch_threshold)
    idx = rng.choice(config.num_transforms, size=config.ops_per_epoch, replace=False)
    gates = rng.standard_normal(config.ops_per_epoch) >= config.op_threshold
    noise_seed = int(rng.integers(0, 2**63))
    magnitude = min(float(config.distortion), MAX_MAGNITUDE)
    return EpochPolicy(
        epoch_gate=epoch_gate,
        chosen=tuple(TRANSFORM_ORDER[int(i)] for i in idx),
        gates=tuple(bool(g) for g in gates),
        magnitudes=(magnitude,) * config.ops_per_epoch,
        noise_seed=noise_seed,
    )


def policy_space_size(config: AutoAugConfig) -> int:
    """Nominal policy count: set size raised to the draws-per-epoch power.

    This is the ordered-with-repetition count, reported as such even though
    the sampler draws distinct transforms.
    """
    return int(config.num_transforms) ** int(config.ops_per_epoch)


def apply_policy(policy: EpochPolicy, image: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the epoch's gated transforms over one chip, in sampled order.

    With the epoch gate closed the input comes back untouched (bit-identical).
    """
    image = np.asarray(image)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    if not policy.epoch_gate:
        return image
    if rng is None:
        rng = np.random.default_rng(policy.noise_seed)
    out = image
    for name, gate, mag in zip(policy.chosen, policy.gates, policy.magnitudes):
        if gate:
            out = transform(name, mag, out, rng)
    return out


# ---------------------------------------------------------------------------
# kernels


def transform(name: str, magnitude: float, image: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one named kernel at the given magnitude (0..10 scale).

    Magnitude 0 is the identity for every kernel except the flips, which have
    no strength knob. The speckle kernel is stochastic; pass an rng for a
    varied stream, otherwise a fixed-seed generator makes it deterministic.
    """
    if name not in TRANSFORM_ORDER:
        raise ValueError(f"unknown transform {name!r}; known: {TRANSFORM_ORDER}")
    if not 0 <= magnitude <= MAX_MAGNITUDE:
        raise ValueError(f"magnitude must be in [0, {MAX_MAGNITUDE}], got {magnitude}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D chip, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    out = _KERNELS[name](image, float(magnitude), rng)
    return np.clip(out, 0.0, 1.0)


def _affine_sample(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear resample: output(y, x) = input(matrix @ (y - cy, x - cx) + c).

    Coordinates outside the chip read as zero.
    """
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rel = np.stack([ys - cy, xs - cx])  # [2, H, W]
    src = np.tensordot(matrix, rel, axes=1)
    sy = src[0] + cy
    sx = src[1] + cx

    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = sy - y0
    fx = sx - x0

    def fetch(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0)

    top = fetch(y0, x0) * (1 - fx) + fetch(y0, x0 + 1) * fx
    bot = fetch(y0 + 1, x0) * (1 - fx) + fetch(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bot * fy


def rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the chip center; exposed for inverse-rotation checks."""
    th = np.deg2rad(angle_deg)
    # inverse rotation maps output pixels back onto the input
    m = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
    return _affine_sample(image, m)


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(image)
    h, w = image.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = image[ys_src, xs_src]
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge-replicated borders."""
    if sigma <= 0:
        return image.copy()
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, ((radius, radius), (0, 0)), mode="edge")
    rows = sum(kernel[i] * padded[i : i + image.shape[0]] for i in range(kernel.size))
    padded = np.pad(rows, ((0, 0), (radius, radius)), mode="edge")
    return sum(kernel[i] * padded[:, i : i + image.shape[1]] for i in range(kernel.size))


def _k_flip_h(img, mag, rng):
    return img[:, ::-1]


def _k_flip_v(img, mag, rng):
    return img[::-1, :]


def _k_rotate(img, mag, rng):
    if mag == 0:
        return img
    return rotate_image(img, _MAX_ROTATE_DEG * mag / MAX_MAGNITUDE)


def _k_translate_x(img, mag, rng):
    pixels = int(round(mag / MAX_MAGNITUDE * _MAX_TRANSLATE_FRAC * img.shape[1]))
    return _shift(img, 0, pixels)


def _k_translate_y(img, mag, rng):
    pixels = int(round(mag / MAX_MAGNITUDE * _MAX_TRANSLATE_FRAC * img.shape[0]))
    return _shift(img, pixels, 0)


def _k_shear_x(img, mag, rng):
    if mag == 0:
        return img
    f = _MAX_SHEAR * mag / MAX_MAGNITUDE
    return _affine_sample(img, np.array([[1.0, 0.0], [-f, 1.0]]))


def _k_shear_y(img, mag, rng):
    if mag == 0:
        return img
    f = _MAX_SHEAR * mag / MAX_MAGNITUDE
    return _affine_sample(img, np.array([[1.0, -f], [0.0, 1.0]]))


def _k_zoom(img, mag, rng):
    if mag == 0:
        return img
    scale = 1.0 - _MAX_ZOOM_SHRINK * mag / MAX_MAGNITUDE
    return _affine_sample(img, np.array([[1.0 / scale, 0.0], [0.0, 1.0 / scale]]))


def _k_brightness(img, mag, rng):
    return img + _MAX_INTENSITY * mag / MAX_MAGNITUDE


def _k_contrast(img, mag, rng):
    mean = img.mean()
    return mean + (img - mean) * (1.0 + _MAX_INTENSITY * mag / MAX_MAGNITUDE)


def _k_blur(img, mag, rng):
    return gaussian_blur(img, _MAX_BLUR_SIGMA * mag / MAX_MAGNITUDE)


def _k_speckle(img, mag, rng):
    if mag == 0:
        return img
    if rng is None:
        rng = np.random.default_rng(0)
    shape = _MIN_SPECKLE_SHAPE * MAX_MAGNITUDE / mag  # harsher noise at higher magnitude
    noise = rng.gamma(shape, scale=1.0 / shape, size=img.shape)  # mean 1
    return img * noise


_KERNELS = {
    "flip_h": _k_flip_h,
    "flip_v": _k_flip_v,
    "rotate": _k_rotate,
    "translate_x": _k_translate_x,
    "translate_y": _k_translate_y,
    "shear_x": _k_shear_x,
    "shear_y": _k_shear_y,
    "zoom": _k_zoom,
    "brightness": _k_brightness,
    "contrast": _k_contrast,
    "blur": _k_blur,
    "speckle": _k_speckle,
}
