"""Few-shot recognition on speckled image chips.

A hybrid convolution-attention classifier trained episodically with a
margin-adjusted cross-entropy plus in-batch triplet loss and epoch-level
gated augmentation, built on a small numpy reverse-mode autodiff core.
"""

from .augment import AutoAugConfig, EpochPolicy, apply_policy, policy_space_size, sample_epoch_policy, transform
from .data import Dataset, Episode, SynthConfig, load_chip_dataset, sample_episode, save_chip_dataset, synth_generate
from .losses import LossReport, MarginConfig, Triplet, hybrid_loss, lm_softmax_ce, mine_triplets, triplet_loss
from .model import ConvT, ConvTConfig, StageParams, default_config, flops_estimate, small_config
from .tensor import Graph, NonFiniteError, ShapeError, Tensor, backward, finite_diff_check
from .trainer import (
    EvalProtocol,
    EvalResult,
    MetricsRecord,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
