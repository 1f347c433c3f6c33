"""Hybrid convolution-attention classifier over token grids.

The network is a stack of stages. Each stage reshapes its token sequence back
to a 2D grid, applies a strided convolution that mixes local features and
shrinks the grid, adds a learned position table, and then runs one or more
pre-norm residual encoder blocks (attention followed by an MLP). A patch
partition realized as a strided convolution produces the initial token grid,
and a single linear layer on the mean-pooled final tokens produces logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    conv2d,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    tensor_mean,
    transpose,
)

__all__ = [
    "StageParams",
    "ConvTConfig",
    "StageActivation",
    "AttentionParams",
    "EncoderBlockParams",
    "ConvT",
    "multi_head_attention",
    "encoder_block",
    "tokens_to_grid",
    "grid_to_tokens",
    "flops_estimate",
    "FlopsReport",
    "default_config",
    "small_config",
]


@dataclass(frozen=True)
class StageParams:
    """One stage: a strided conv embedding plus encoder blocks."""

    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    num_heads: int = 1
    num_encoder_blocks: int = 1


@dataclass(frozen=True)
class ConvTConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    num_classes: int = 10
    patch_size: int = 4
    stages: tuple[StageParams, ...] = ()
    mlp_ratio: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size <= 0:
            raise ValueError(f"patch_size must be positive, got {self.patch_size}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.stages:
            raise ValueError("config needs at least one stage")
        for i, st in enumerate(self.stages):
            if st.stride < 1 or st.kernel[0] < 1 or st.kernel[1] < 1 or st.num_heads < 1:
                raise ValueError(f"stage {i} has invalid stride/kernel/heads: {st}")
            if st.out_channels % st.num_heads != 0:
                raise ValueError(
                    f"stage {i}: channels {st.out_channels} not divisible by heads {st.num_heads}"
                )
        for i, (h, w) in enumerate(self.grid_sizes()):
            if h < 1 or w < 1:
                raise ValueError(f"spatial size collapses below 1x1 (grid {h}x{w} after step {i})")

    def grid_sizes(self) -> list[tuple[int, int]]:
        """Token grid after the patch partition and after each stage conv."""
        h = -(-self.input_size[0] // self.patch_size)  # ceil: inputs are zero-padded
        w = -(-self.input_size[1] // self.patch_size)
        grids = [(h, w)]
        for st in self.stages:
            kh, kw = st.kernel
            ph, pw = kh // 2, kw // 2
            h = (h + 2 * ph - kh) // st.stride + 1
            w = (w + 2 * pw - kw) // st.stride + 1
            grids.append((h, w))
        return grids


def default_config(num_classes: int = 10, input_size=(64, 64), seed: int = 0) -> ConvTConfig:
    """Desk-scale default: 3 stages, widening channels, shrinking grid."""
    return ConvTConfig(
        input_size=tuple(input_size),
        in_channels=1,
        num_classes=num_classes,
        patch_size=4,
        stages=(
            StageParams(out_channels=64, kernel=(3, 3), stride=1, num_heads=2),
            StageParams(out_channels=128, kernel=(3, 3), stride=2, num_heads=4),
            StageParams(out_channels=256, kernel=(3, 3), stride=2, num_heads=8),
        ),
        mlp_ratio=2.0,
        seed=seed,
    )


def small_config(num_classes: int = 3, seed: int = 0) -> ConvTConfig:
    """Tiny 16x16 two-stage config used for gradient checking."""
    return ConvTConfig(
        input_size=(16, 16),
        in_channels=1,
        num_classes=num_classes,
        patch_size=2,
        stages=(
            StageParams(out_channels=8, kernel=(3, 3), stride=1, num_heads=2),
            StageParams(out_channels=16, kernel=(3, 3), stride=2, num_heads=2),
        ),
        mlp_ratio=2.0,
        seed=seed,
    )


@dataclass
class StageActivation:
    """Token sequence plus the 2D grid it flattens; round-trips exactly."""

    tokens: Tensor  # [B, H*W, C]
    grid: tuple[int, int]
    padded: bool = False

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[1] != h * w:
            raise ValueError(f"token count {self.tokens.shape[1]} != grid {h}x{w}")


@dataclass
class AttentionParams:
    """Projection weights for all heads, stored as stacked [C, C] matrices.

    Slicing the channel axis into ``num_heads`` blocks of ``head_dim`` columns
    recovers the per-head projections.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    num_heads: int

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.num_heads


@dataclass
class EncoderBlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attn: AttentionParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def tokens_to_grid(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """[B, H*W, C] -> [B, C, H, W]."""
    b, t, c = tokens.shape
    h, w = grid
    return transpose(reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C]."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def multi_head_attention(
    tokens: Tensor,
    params: AttentionParams,
    collect_weights: list | None = None,
) -> Tensor:
    """Scaled dot-product attention over the token axis, one softmax per head.

    Per head, queries/keys/values come from learned linear maps; attention
    weights are softmax(q @ k^T / sqrt(head_dim)) over the key axis; head
    outputs are concatenated (via reshape) and linearly projected.
    """
    b, t, c = tokens.shape
    if params.wq.shape[0] != c:
        raise ValueError(f"attention params expect {params.wq.shape[0]} channels, got {c}")
    heads = params.num_heads
    dk = params.head_dim

    def split_heads(x):
        return transpose(reshape(x, (b, t, heads, dk)), (0, 2, 1, 3))  # [B, h, T, dk]

    q = split_heads(matmul(tokens, params.wq) + params.bq)
    k = split_heads(matmul(tokens, params.wk) + params.bk)
    v = split_heads(matmul(tokens, params.wv) + params.bv)

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    weights = softmax(scores, axis=-1)  # [B, h, T, T]
    if collect_weights is not None:
        collect_weights.append(weights.data.copy())
    context = matmul(weights, v)  # [B, h, T, dk]
    merged = reshape(transpose(context, (0, 2, 1, 3)), (b, t, c))
    return matmul(merged, params.wo) + params.bo


def encoder_block(
    act: StageActivation,
    params: EncoderBlockParams,
    collect_weights: list | None = None,
) -> StageActivation:
    """Pre-norm residual block: attention then MLP, each added back to its input."""
    x = act.tokens
    attended = multi_head_attention(
        layer_norm(x, params.norm1_gamma, params.norm1_beta), params.attn, collect_weights
    )
    mixed = attended + x
    hidden = gelu(matmul(layer_norm(mixed, params.norm2_gamma, params.norm2_beta), params.mlp_w1) + params.mlp_b1)
    out = (matmul(hidden, params.mlp_w2) + params.mlp_b2) + mixed
    return StageActivation(out, act.grid, act.padded)


@dataclass
class StageWeights:
    conv_kernel: Tensor  # [F, I, KH, KW]
    conv_bias: Tensor  # [F]
    pos_embed: Tensor  # [1, H*W, F]
    blocks: list[EncoderBlockParams] = field(default_factory=list)


class ConvT:
    """The full model: patch partition, stages, mean-pool, linear head."""

    def __init__(self, config: ConvTConfig, dtype: str = "float64"):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dtype}")
        self._params: dict[str, Tensor] = {}
        self._init_weights(np.random.default_rng(config.seed))

    # -- construction -------------------------------------------------------

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def _uniform(self, rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _init_weights(self, rng: np.random.Generator) -> None:
        cfg = self.config
        grids = cfg.grid_sizes()
        c_first = cfg.stages[0].out_channels
        p = cfg.patch_size

        self.patch_kernel = self._param(
            "patch.kernel", self._uniform(rng, (c_first, cfg.in_channels, p, p), cfg.in_channels * p * p)
        )
        self.patch_bias = self._param("patch.bias", np.zeros(c_first))

        self.stages: list[StageWeights] = []
        in_ch = c_first
        for si, st in enumerate(cfg.stages):
            kh, kw = st.kernel
            h, w = grids[si + 1]
            prefix = f"stage{si}"
            sw = StageWeights(
                conv_kernel=self._param(
                    f"{prefix}.conv.kernel",
                    self._uniform(rng, (st.out_channels, in_ch, kh, kw), in_ch * kh * kw),
                ),
                conv_bias=self._param(f"{prefix}.conv.bias", np.zeros(st.out_channels)),
                pos_embed=self._param(
                    f"{prefix}.pos", rng.uniform(-0.02, 0.02, size=(1, h * w, st.out_channels))
                ),
            )
            c = st.out_channels
            hidden = int(round(cfg.mlp_ratio * c))
            for bi in range(st.num_encoder_blocks):
                bp = f"{prefix}.block{bi}"
                sw.blocks.append(
                    EncoderBlockParams(
                        norm1_gamma=self._param(f"{bp}.norm1.gamma", np.ones(c)),
                        norm1_beta=self._param(f"{bp}.norm1.beta", np.zeros(c)),
                        attn=AttentionParams(
                            wq=self._param(f"{bp}.attn.wq", self._uniform(rng, (c, c), c)),
                            wk=self._param(f"{bp}.attn.wk", self._uniform(rng, (c, c), c)),
                            wv=self._param(f"{bp}.attn.wv", self._uniform(rng, (c, c), c)),
                            wo=self._param(f"{bp}.attn.wo", self._uniform(rng, (c, c), c)),
                            bq=self._param(f"{bp}.attn.bq", np.zeros(c)),
                            bk=self._param(f"{bp}.attn.bk", np.zeros(c)),
                            bv=self._param(f"{bp}.attn.bv", np.zeros(c)),
                            bo=self._param(f"{bp}.attn.bo", np.zeros(c)),
                            num_heads=st.num_heads,
                        ),
                        norm2_gamma=self._param(f"{bp}.norm2.gamma", np.ones(c)),
                        norm2_beta=self._param(f"{bp}.norm2.beta", np.zeros(c)),
                        mlp_w1=self._param(f"{bp}.mlp.w1", self._uniform(rng, (c, hidden), c)),
                        mlp_b1=self._param(f"{bp}.mlp.b1", np.zeros(hidden)),
                        mlp_w2=self._param(f"{bp}.mlp.w2", self._uniform(rng, (hidden, c), hidden)),
                        mlp_b2=self._param(f"{bp}.mlp.b2", np.zeros(c)),
                    )
                )
            self.stages.append(sw)
            in_ch = st.out_channels

        c_last = cfg.stages[-1].out_channels
        self.head_w = self._param("head.w", self._uniform(rng, (c_last, cfg.num_classes), c_last))
        self.head_b = self._param("head.b", np.zeros(cfg.num_classes))

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    @property
    def embedding_dim(self) -> int:
        return self.config.stages[-1].out_channels

    def astype(self, dtype) -> "ConvT":
        """Cast all parameters in place (training may run in float32)."""
        dtype = np.dtype(dtype)
        if dtype != self.dtype:
            self.dtype = dtype
            for t in self._params.values():
                t.data = t.data.astype(dtype)
                t.grad = None
        return self

    # -- forward pieces ------------------------------------------------------

    def patch_partition(self, images) -> StageActivation:
        """Split images into non-overlapping patches via a strided convolution.

        Inputs whose sides are not divisible by the patch size are zero-padded
        on the right/bottom, and the activation is flagged as padded.
        """
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim != 4:
            raise ValueError(f"expected [B, C, H, W] images, got shape {data.shape}")
        if data.shape[0] == 0:
            raise ValueError("batch of zero images")
        if data.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {data.shape[1]}"
            )
        p = self.config.patch_size
        pad_h = (-data.shape[2]) % p
        pad_w = (-data.shape[3]) % p
        padded = bool(pad_h or pad_w)
        if padded:
            data = np.pad(data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
        x = Tensor(data.astype(self.dtype, copy=False))
        out = conv2d(x, self.patch_kernel, stride=p, padding=0)
        out = out + reshape(self.patch_bias, (1, -1, 1, 1))
        grid = (out.shape[2], out.shape[3])
        return StageActivation(grid_to_tokens(out), grid, padded)

    def conv_embedding(self, act: StageActivation, stage_index: int) -> StageActivation:
        """Reshape tokens to their grid, convolve with stride, add positions."""
        st = self.config.stages[stage_index]
        sw = self.stages[stage_index]
        kh, kw = st.kernel
        x = tokens_to_grid(act.tokens, act.grid)
        out = conv2d(x, sw.conv_kernel, stride=st.stride, padding=kh // 2)
        if out.shape[2] < 1 or out.shape[3] < 1:
            raise ValueError(f"stage {stage_index} produced an empty grid from {act.grid}")
        out = out + reshape(sw.conv_bias, (1, -1, 1, 1))
        grid = (out.shape[2], out.shape[3])
        tokens = grid_to_tokens(out) + sw.pos_embed
        return StageActivation(tokens, grid, act.padded)

    def forward(self, images, collect_weights: list | None = None) -> tuple[Tensor, Tensor]:
        """Return (logits [B, num_classes], embedding [B, E]).

        The embedding is the spatial mean of the final stage's tokens and is
        the vector used for triplet distances.
        """
        act = self.patch_partition(images)
        for si in range(len(self.config.stages)):
            act = self.conv_embedding(act, si)
            for block in self.stages[si].blocks:
                act = encoder_block(act, block, collect_weights)
        embedding = tensor_mean(act.tokens, axis=1)
        logits = matmul(embedding, self.head_w) + self.head_b
        return logits, embedding


# ---------------------------------------------------------------------------
# complexity model


@dataclass
class FlopsReport:
    """Multiply-accumulate counts by component; ``total`` is their sum.

    ``conv_terms`` lists the per-layer convolution products (patch partition
    first, then one per stage); ``conv`` is their sum. Each term is linear in
    each of its factors separately; the subtotal scales with factors shared by
    every layer, like the input area.
    """

    conv_terms: list[int]
    attention: int
    mlp: int
    head: int

    @property
    def conv(self) -> int:
        return sum(self.conv_terms)

    @property
    def total(self) -> int:
        return self.conv + self.attention + self.mlp + self.head

    def __int__(self) -> int:
        return self.total


def flops_estimate(config: ConvTConfig) -> FlopsReport:
    """Count multiply-accumulates for one image through the model.

    Convolution terms follow the input-size convention: each conv layer costs
    grid_h * grid_w * kernel_h * kernel_w * out_channels * in_channels, where
    the grid is the layer's input resolution. Attention and MLP terms count
    their matrix products at each stage's token count.
    """
    config.validate()
    grids = config.grid_sizes()
    ih, iw = config.input_size
    p = config.patch_size

    conv_terms = [ih * iw * p * p * config.stages[0].out_channels * config.in_channels]
    attention = 0
    mlp = 0
    in_ch = config.stages[0].out_channels
    for si, st in enumerate(config.stages):
        gh, gw = grids[si]  # conv input grid for this stage
        kh, kw = st.kernel
        conv_terms.append(gh * gw * kh * kw * st.out_channels * in_ch)
        th, tw = grids[si + 1]
        t = th * tw
        c = st.out_channels
        hidden = int(round(config.mlp_ratio * c))
        per_block_attn = 3 * t * c * c + 2 * t * t * c + t * c * c
        per_block_mlp = 2 * t * c * hidden
        attention += st.num_encoder_blocks * per_block_attn
        mlp += st.num_encoder_blocks * per_block_mlp
        in_ch = c

    head = config.stages[-1].out_channels * config.num_classes
    return FlopsReport(conv_terms=conv_terms, attention=attention, mlp=mlp, head=head)
