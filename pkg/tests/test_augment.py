import numpy as np
import pytest

from convt.augment import (
    TRANSFORM_ORDER,
    AutoAugConfig,
    apply_policy,
    gaussian_blur,
    policy_space_size,
    rotate_image,
    sample_epoch_policy,
    transform,
)


def smooth_chip(size=64, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.random((size, size))
    for _ in range(3):
        base = gaussian_blur(base, 2.0)
    lo, hi = base.min(), base.max()
    return (base - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# policy sampling


def test_policy_deterministic():
    cfg = AutoAugConfig(seed=7)
    assert sample_epoch_policy(cfg, 13) == sample_epoch_policy(cfg, 13)
    assert sample_epoch_policy(cfg, 13) != sample_epoch_policy(cfg, 14)


def test_policy_fields():
    cfg = AutoAugConfig(ops_per_epoch=4, distortion=2.5, seed=1)
    pol = sample_epoch_policy(cfg, 0)
    assert len(pol.chosen) == len(pol.gates) == len(pol.magnitudes) == 4
    assert len(set(pol.chosen)) == 4  # pairwise distinct
    assert all(name in TRANSFORM_ORDER for name in pol.chosen)
    assert all(m == 2.5 for m in pol.magnitudes)


def test_infinite_epoch_threshold_never_gates():
    cfg = AutoAugConfig(epoch_threshold=float("inf"), seed=2)
    img = smooth_chip()
    for epoch in range(50):
        pol = sample_epoch_policy(cfg, epoch)
        assert not pol.epoch_gate
        out = apply_policy(pol, img)
        assert out is img  # bit-identical passthrough


def test_gate_rates_monte_carlo():
    cfg = AutoAugConfig(seed=3)
    epoch_hits = 0
    op_hits = 0
    op_total = 0
    n = 10_000
    for epoch in range(n):
        pol = sample_epoch_policy(cfg, epoch)
        epoch_hits += pol.epoch_gate
        op_hits += sum(pol.gates)
        op_total += len(pol.gates)
    assert 0.48 <= epoch_hits / n <= 0.52
    assert 0.48 <= op_hits / op_total <= 0.52


def test_k_larger_than_n_rejected():
    with pytest.raises(ValueError):
        sample_epoch_policy(AutoAugConfig(num_transforms=4, ops_per_epoch=5), 0)


def test_policy_space_size():
    assert policy_space_size(AutoAugConfig(num_transforms=12, ops_per_epoch=3)) == 1728
    assert policy_space_size(AutoAugConfig(num_transforms=12, ops_per_epoch=5)) == 248832
    assert policy_space_size(AutoAugConfig(num_transforms=12, ops_per_epoch=0)) == 1
    # stays exact beyond 64-bit
    assert policy_space_size(AutoAugConfig(num_transforms=12, ops_per_epoch=60)) == 12**60


# ---------------------------------------------------------------------------
# kernels


@pytest.mark.parametrize("name", TRANSFORM_ORDER)
@pytest.mark.parametrize("magnitude", [0.0, 3.0, 10.0])
def test_every_transform_preserves_shape_and_range(name, magnitude):
    img = smooth_chip(48, seed=5)
    out = transform(name, magnitude, img, np.random.default_rng(0))
    assert out.shape == img.shape
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.all(np.isfinite(out))


def test_brightness_zero_identity():
    img = smooth_chip(32, seed=6)
    assert np.allclose(transform("brightness", 0.0, img), img)


def test_flip_involution():
    img = smooth_chip(32, seed=7)
    assert np.allclose(transform("flip_h", 5.0, transform("flip_h", 5.0, img)), img)
    assert np.allclose(transform("flip_v", 5.0, transform("flip_v", 5.0, img)), img)


def test_translate_pixel_rule():
    img = smooth_chip(40, seed=8)
    mag = 4.0
    pixels = round(mag / 10.0 * 0.3 * 40)  # the documented shift rule
    out = transform("translate_x", mag, img)
    assert np.allclose(out[:, pixels:], img[:, : 40 - pixels])
    assert np.allclose(out[:, :pixels], 0.0)
    out_y = transform("translate_y", mag, img)
    assert np.allclose(out_y[pixels:, :], img[: 40 - pixels, :])


def test_rotate_inverse_round_trip():
    img = smooth_chip(64, seed=9)
    angle = 3.0 / 10.0 * 30.0  # distortion 3 maps to 9 degrees
    once = rotate_image(img, angle)
    back = rotate_image(once, -angle)
    # compare away from the border, where zero fill never reaches
    h = 8
    diff = np.abs(back[h:-h, h:-h] - img[h:-h, h:-h])
    assert diff.max() < 0.05


def test_speckle_preserves_mean():
    img = np.full((64, 64), 0.5)
    rng = np.random.default_rng(10)
    out = transform("speckle", 6.0, img, rng)
    assert abs(out.mean() - img.mean()) / img.mean() < 0.03


def test_speckle_zero_magnitude_identity():
    img = smooth_chip(32, seed=11)
    assert np.allclose(transform("speckle", 0.0, img, np.random.default_rng(0)), img)


def test_unknown_transform_rejected():
    with pytest.raises(ValueError):
        transform("sharpen", 1.0, smooth_chip(16))


def test_magnitude_out_of_range_rejected():
    with pytest.raises(ValueError):
        transform("rotate", 11.0, smooth_chip(16))


def test_blur_zero_sigma_identity():
    img = smooth_chip(24, seed=12)
    assert np.allclose(transform("blur", 0.0, img), img)


# ---------------------------------------------------------------------------
# apply_policy


def test_apply_policy_all_gates_closed_identity():
    cfg = AutoAugConfig(op_threshold=float("inf"), seed=13)
    img = smooth_chip(32, seed=13)
    for epoch in range(20):
        pol = sample_epoch_policy(cfg, epoch)
        out = apply_policy(pol, img)
        assert np.array_equal(out, img)


def test_apply_policy_rejects_nonfinite():
    pol = sample_epoch_policy(AutoAugConfig(seed=14), 0)
    bad = np.ones((8, 8))
    bad[3, 3] = np.nan
    with pytest.raises(ValueError):
        apply_policy(pol, bad)


def test_apply_policy_deterministic_without_rng():
    cfg = AutoAugConfig(seed=15, distortion=8.0)
    img = smooth_chip(32, seed=15)
    for epoch in range(6):
        pol = sample_epoch_policy(cfg, epoch)
        assert np.array_equal(apply_policy(pol, img), apply_policy(pol, img))


def test_apply_policy_shape_and_range():
    cfg = AutoAugConfig(seed=16, distortion=10.0)
    img = smooth_chip(32, seed=16)
    rng = np.random.default_rng(16)
    for epoch in range(20):
        out = apply_policy(sample_epoch_policy(cfg, epoch), img, rng)
        assert out.shape == img.shape
        assert np.all((out >= 0.0) & (out <= 1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        AutoAugConfig(num_transforms=0).validate()
    with pytest.raises(ValueError):
        AutoAugConfig(num_transforms=13).validate()
    with pytest.raises(ValueError):
        AutoAugConfig(distortion=-1.0).validate()
    AutoAugConfig().validate()
