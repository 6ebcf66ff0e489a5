"""Hyperparameters for the encoder-decoder translation model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

# Token ids fixed by Vocabulary's layout: the four specials come first.
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_COUNT_FIELDS = (
    "vocab_size",
    "max_len",
    "d_model",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "d_ff",
)


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the reduced encoder-decoder model.

    Defaults follow the downsized configuration used throughout: 128-wide
    embeddings, 8 attention heads, two encoder and two decoder layers, and a
    feed-forward width of 4 * d_model (the d_ff default of 0 means exactly
    that).
    """

    vocab_size: int
    max_len: int
    d_model: int = 128
    n_heads: int = 8
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in _COUNT_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout!r}")
        if self.vocab_size <= UNK_ID:
            raise ValueError("vocab_size must cover the four special tokens")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)
