"""Finite-difference verification suite covering every differentiable op.

Each check builds a small random problem in float64, reduces it to a scalar
through fixed random weights, and compares reverse-mode gradients against
central differences. The composite check runs the full model plus hybrid loss
on a tiny two-stage configuration and samples coordinates across every
parameter.
"""

from __future__ import annotations

import numpy as np

from .losses import MarginConfig, hybrid_loss
from .model import ConvT, small_config
from .tensor import (
    FiniteDiffReport,
    Tensor,
    add,
    conv2d,
    finite_diff_check,
    gather_rows,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    relu,
    softmax,
    sub,
    take_per_row,
    tensor_mean,
    tensor_sum,
    transpose,
)

__all__ = ["OP_CHECKS", "check_op", "composite_check", "run_all"]


def _weighted_sum(t, w):
    return tensor_sum(mul(t, Tensor(w)))


def _check(build, params, num_samples, seed, tol=1e-4):
    return finite_diff_check(
        build, params, step=1e-5, tol=tol, num_samples=num_samples, rng=np.random.default_rng(seed)
    )


def _check_add(seed, n):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)  # broadcasts
    w = rng.standard_normal((3, 4))
    return _check(lambda: _weighted_sum(add(a, b), w), {"a": a, "b": b}, n, seed)


def _check_sub(seed, n):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return _check(lambda: _weighted_sum(sub(a, b), w), {"a": a, "b": b}, n, seed)


def _check_mul(seed, n):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return _check(lambda: _weighted_sum(mul(a, b), w), {"a": a, "b": b}, n, seed)


def _check_matmul(seed, n):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w = rng.standard_normal((2, 3, 5))
    return _check(lambda: _weighted_sum(matmul(a, b), w), {"a": a, "b": b}, n, seed)


def _check_conv2d(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    w = rng.standard_normal((2, 4, 3, 3))
    return _check(lambda: _weighted_sum(conv2d(x, k, stride=2, padding=1), w), {"x": x, "k": k}, n, seed)


def _check_layer_norm(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(8), requires_grad=True)
    beta = Tensor(rng.standard_normal(8), requires_grad=True)
    w = rng.standard_normal((4, 8))
    return _check(
        lambda: _weighted_sum(layer_norm(x, gamma, beta), w),
        {"x": x, "gamma": gamma, "beta": beta},
        n,
        seed,
    )


def _check_softmax(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
    w = rng.standard_normal((4, 7))
    return _check(lambda: _weighted_sum(softmax(x, axis=-1), w), {"x": x}, n, seed)


def _check_log_softmax(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 7)), requires_grad=True)
    w = rng.standard_normal((4, 7))
    return _check(lambda: _weighted_sum(log_softmax(x, axis=-1), w), {"x": x}, n, seed)


def _check_gelu(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    w = rng.standard_normal((5, 6))
    return _check(lambda: _weighted_sum(gelu(x), w), {"x": x}, n, seed)


def _check_relu(seed, n):
    rng = np.random.default_rng(seed)
    # keep values away from the kink, where finite differences are undefined
    x = Tensor(np.where(np.abs(rng.standard_normal((5, 6))) < 0.05, 0.5, rng.standard_normal((5, 6))),
               requires_grad=True)
    w = rng.standard_normal((5, 6))
    return _check(lambda: _weighted_sum(relu(x), w), {"x": x}, n, seed)


def _check_reductions(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    w1 = rng.standard_normal((3, 5))
    w2 = rng.standard_normal((4, 5))

    def build():
        a = _weighted_sum(tensor_sum(x, axis=1), w1)
        b = _weighted_sum(tensor_mean(transpose(x, (1, 2, 0)), axis=-1), w2)
        return add(a, b)

    return _check(build, {"x": x}, n, seed)


def _check_gather(seed, n):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    idx = np.array([0, 2, 2, 5, 1])
    labels = np.array([1, 3, 0, 2, 4, 1])
    w1 = rng.standard_normal((5, 5))
    w2 = rng.standard_normal(6)

    def build():
        a = _weighted_sum(gather_rows(x, idx), w1)
        b = tensor_sum(mul(take_per_row(x, labels), Tensor(w2)))
        return add(a, b)

    return _check(build, {"x": x}, n, seed)


OP_CHECKS = {
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "matmul": _check_matmul,
    "conv2d": _check_conv2d,
    "layer_norm": _check_layer_norm,
    "softmax": _check_softmax,
    "log_softmax": _check_log_softmax,
    "gelu": _check_gelu,
    "relu": _check_relu,
    "reductions": _check_reductions,
    "gather": _check_gather,
}


def check_op(name: str, seed: int = 0, num_samples: int = 40) -> FiniteDiffReport:
    if name not in OP_CHECKS:
        raise ValueError(f"unknown op {name!r}; known: {sorted(OP_CHECKS)}")
    return OP_CHECKS[name](seed, num_samples)


def composite_check(seed: int = 0, num_samples: int = 200) -> FiniteDiffReport:
    """Model forward plus hybrid loss, differentiated through every parameter.

    Uses the tiny 16x16 two-stage configuration and a 6-chip batch with two
    samples per class so triplets exist.
    """
    rng = np.random.default_rng(seed)
    model = ConvT(small_config(num_classes=3, seed=seed), dtype="float64")
    images = rng.random((6, 1, 16, 16))
    labels = np.array([0, 0, 1, 1, 2, 2])
    margins = MarginConfig(lm_margin=0.35, triplet_margin=0.3, mining="batch_all")

    def build():
        logits, emb = model.forward(images)
        return hybrid_loss(logits, emb, labels, margins).total

    return finite_diff_check(
        build,
        model.parameters(),
        step=1e-5,
        tol=1e-4,
        num_samples=num_samples,
        rng=np.random.default_rng(seed + 1),
    )


def run_all(ops=None, seed: int = 0, num_samples: int = 40, composite_samples: int = 200):
    """Run the requested checks (default: everything plus the composite).

    Returns a dict name -> FiniteDiffReport.
    """
    names = list(OP_CHECKS) + ["composite"] if ops is None else list(ops)
    reports = {}
    for name in names:
        if name == "composite":
            reports[name] = composite_check(seed, composite_samples)
        else:
            reports[name] = check_op(name, seed, num_samples)
    return reports
