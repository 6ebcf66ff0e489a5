"""Sequence-to-sequence model: transformer, decoding, and training.

Kept out of the package root so that importing pfd2pid stays numpy-free;
import this subpackage explicitly for model work.
"""

from .config import BOS_ID, EOS_ID, PAD_ID, UNK_ID, ModelConfig
from .decoding import (
    BeamHypothesis,
    decode_beam,
    decode_greedy,
    ids_to_text,
    sequence_log_prob,
    translate,
)
from .training import (
    Checkpoint,
    DivergenceError,
    TrainConfig,
    encode_pairs,
    train,
)
from .transformer import (
    ShapeError,
    Transformer,
    grad_check,
    init_params,
    n_params,
    pack_params,
    param_layout,
    unpack_params,
)

__all__ = [
    "BOS_ID",
    "BeamHypothesis",
    "Checkpoint",
    "DivergenceError",
    "EOS_ID",
    "ModelConfig",
    "PAD_ID",
    "ShapeError",
    "TrainConfig",
    "Transformer",
    "UNK_ID",
    "decode_beam",
    "decode_greedy",
    "encode_pairs",
    "grad_check",
    "ids_to_text",
    "init_params",
    "n_params",
    "pack_params",
    "param_layout",
    "sequence_log_prob",
    "train",
    "translate",
    "unpack_params",
]
