"""Decoder models over the global vocabulary: config, network, decoding, checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ARCH_ABSOLUTE,
    ARCH_ROTARY,
    DEFAULT_CONTEXT_LEN,
    ModelConfig,
    preset_config,
    preset_names,
)
from .decoding import GREEDY, DecodeStrategy, decode_row, generate_rows
from .transformer import (
    LossBreakdown,
    ModelState,
    VocabMismatchError,
    check_vocab,
    evaluate_loss,
    forward,
    init_model,
    loss_and_grads,
    next_field_distribution,
    pad_batch,
    per_row_entropy,
    token_nlls,
)

__all__ = [
    "ARCH_ABSOLUTE",
    "ARCH_ROTARY",
    "DEFAULT_CONTEXT_LEN",
    "CheckpointError",
    "DecodeStrategy",
    "GREEDY",
    "LossBreakdown",
    "ModelConfig",
    "ModelState",
    "VocabMismatchError",
    "check_vocab",
    "decode_row",
    "evaluate_loss",
    "forward",
    "generate_rows",
    "init_model",
    "load_checkpoint",
    "loss_and_grads",
    "next_field_distribution",
    "pad_batch",
    "per_row_entropy",
    "preset_config",
    "preset_names",
    "save_checkpoint",
    "token_nlls",
]
