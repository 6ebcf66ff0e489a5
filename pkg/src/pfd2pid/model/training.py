"""Teacher-forcing training: Adam with a fixed learning rate, periodic
validation, early stopping by patience counted in evaluations, a loss-history
CSV, and flat-array checkpoints that embed the vocabulary."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..tokenizer import SPECIALS, Vocabulary, tokenize
from .config import BOS_ID, EOS_ID, PAD_ID, ModelConfig
from .transformer import Transformer, n_params, pack_params, param_layout, unpack_params

HISTORY_HEADER = "epochs,loss_train,loss_val"


class DivergenceError(RuntimeError):
    """Raised when a training or validation loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule. patience counts evaluations (one per
    eval_every steps) without a validation improvement before stopping;
    max_steps is an optional hard budget, 0 meaning no training at all."""

    learning_rate: float
    batch_size: int
    eval_every: int
    patience: int
    seed: int = 0
    max_steps: int | None = None
    history_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "eval_every", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class Checkpoint:
    """Model weights flattened in layout order plus enough metadata to
    rebuild the model and verify it is paired with the right vocabulary."""

    config: ModelConfig
    weights: np.ndarray
    vocab_hash: str
    step: int
    best_val_loss: float
    vocab: Vocabulary | None = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 1 or self.weights.size != n_params(self.config):
            raise ValueError(
                f"weights must be a flat array of {n_params(self.config)} entries,"
                f" got shape {self.weights.shape}"
            )
        if self.vocab is not None:
            if self.vocab.content_hash() != self.vocab_hash:
                raise ValueError("embedded vocabulary does not match vocab_hash")
            if self.vocab.size != self.config.vocab_size:
                raise ValueError("embedded vocabulary size does not match the config")

    @classmethod
    def from_model(cls, model: Transformer, vocab: Vocabulary, step: int, best_val_loss: float) -> "Checkpoint":
        return cls(
            config=model.config,
            weights=pack_params(model.config, model.params),
            vocab_hash=vocab.content_hash(),
            step=step,
            best_val_loss=best_val_loss,
            vocab=vocab,
        )

    def to_model(self, dtype=np.float32) -> Transformer:
        return Transformer(self.config, unpack_params(self.config, self.weights, dtype))

    def save(self, path) -> None:
        meta = {
            "config": self.config.to_json_dict(),
            "layout": [[name, list(shape)] for name, shape in param_layout(self.config)],
            "vocab_hash": self.vocab_hash,
            "step": self.step,
            "best_val_loss": self.best_val_loss,
            "vocab": None if self.vocab is None else list(SPECIALS + self.vocab.tokens),
        }
        with open(path, "wb") as fh:
            np.savez(fh, weights=self.weights, meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as data:
            weights = np.array(data["weights"])
            meta = json.loads(str(data["meta"][()]))
        vocab = None
        if meta["vocab"] is not None:
            tokens = meta["vocab"]
            if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
                raise ValueError("checkpoint vocabulary must start with the special tokens")
            vocab = Vocabulary(tokens=tuple(tokens[len(SPECIALS) :]))
        return cls(
            config=ModelConfig.from_json_dict(meta["config"]),
            weights=weights,
            vocab_hash=meta["vocab_hash"],
            step=int(meta["step"]),
            best_val_loss=float(meta["best_val_loss"]),
            vocab=vocab,
        )


class _Adam:
    def __init__(self, params: dict, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def encode_pairs(pairs, vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    """Tokenize dataset pairs into (source ids, target ids) without specials."""
    encoded = []
    for pair in pairs:
        src, _ = vocab.encode(tokenize(pair.pfd_sfiles.text))
        tgt, _ = vocab.encode(tokenize(pair.pid_sfiles.text))
        encoded.append((src, tgt))
    return encoded


def _prepare(pairs, max_len: int):
    """Attach the sentinels: source gets a trailing EOS, the decoder sees a
    BOS-shifted input and predicts the target plus EOS."""
    items = []
    for i, (src, tgt) in enumerate(pairs):
        if len(src) + 1 > max_len or len(tgt) + 1 > max_len:
            raise ValueError(
                f"pair {i} needs {max(len(src), len(tgt)) + 1} positions,"
                f" over the model's max_len {max_len}"
            )
        items.append((list(src) + [EOS_ID], [BOS_ID] + list(tgt), list(tgt) + [EOS_ID]))
    return items


def _pad_batch(seqs, dtype=np.int64) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _assemble(items, indices):
    src = _pad_batch([items[i][0] for i in indices])
    tgt_in = _pad_batch([items[i][1] for i in indices])
    tgt_out = _pad_batch([items[i][2] for i in indices])
    return src, tgt_in, tgt_out


def _batches(lengths: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffle, then length-sort inside pools of 16 batches so each batch
    pads little; finally shuffle the batch order."""
    order = rng.permutation(lengths.size)
    pool = batch_size * 16
    batches = []
    for start in range(0, lengths.size, pool):
        chunk = order[start : start + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        for b in range(0, len(chunk), batch_size):
            batches.append(chunk[b : b + batch_size])
    rng.shuffle(batches)
    return batches


def _evaluate(model: Transformer, items, batch_size: int) -> float:
    """Token-weighted mean validation loss in a fixed, length-sorted order."""
    order = sorted(range(len(items)), key=lambda i: len(items[i][2]))
    total, count = 0.0, 0
    for start in range(0, len(order), batch_size):
        src, tgt_in, tgt_out = _assemble(items, order[start : start + batch_size])
        loss, n_tokens = model.loss(src, tgt_in, tgt_out)
        total += loss * n_tokens
        count += n_tokens
    return total / count


def train(model: Transformer, train_pairs, val_pairs, tc: TrainConfig, vocab: Vocabulary) -> Checkpoint:
    """Optimize until validation loss stops improving for tc.patience
    evaluations (or max_steps). Returns the checkpoint at the best validation
    loss; the model object itself is left at its final weights."""
    if vocab.size != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {vocab.size} does not match model vocab_size"
            f" {model.config.vocab_size}"
        )
    train_items = _prepare(train_pairs, model.config.max_len)
    val_items = _prepare(val_pairs, model.config.max_len)
    if not train_items or not val_items:
        raise ValueError("training and validation datasets must be non-empty")

    rng = np.random.default_rng(tc.seed)
    dropout_rng = np.random.default_rng(tc.seed + 1) if model.config.dropout > 0 else None
    optimizer = _Adam(model.params, tc.learning_rate)
    tgt_lengths = np.array([len(item[2]) for item in train_items])

    history_fh = open(tc.history_path, "w", encoding="utf-8") if tc.history_path else None
    if history_fh:
        history_fh.write(HISTORY_HEADER + "\n")

    best_loss = math.inf
    best_weights: np.ndarray | None = None
    best_step = 0
    bad_evals = 0
    step = 0
    seen = 0
    run_sum, run_tokens = 0.0, 0
    done = tc.max_steps == 0
    try:
        while not done:
            for batch in _batches(tgt_lengths, tc.batch_size, rng):
                src, tgt_in, tgt_out = _assemble(train_items, batch)
                loss, n_tokens, grads = model.loss_and_grads(
                    src, tgt_in, tgt_out, dropout_rng=dropout_rng
                )
                if not math.isfinite(loss):
                    raise DivergenceError(f"training loss became {loss} at step {step + 1}")
                optimizer.step(model.params, grads)
                step += 1
                seen += len(batch)
                run_sum += loss * n_tokens
                run_tokens += n_tokens
                if step % tc.eval_every == 0:
                    val_loss = _evaluate(model, val_items, tc.batch_size)
                    if not math.isfinite(val_loss):
                        raise DivergenceError(f"validation loss became {val_loss} at step {step}")
                    if history_fh:
                        epochs = seen / len(train_items)
                        train_loss = run_sum / max(run_tokens, 1)
                        history_fh.write(f"{epochs:.4f},{train_loss:.6f},{val_loss:.6f}\n")
                        history_fh.flush()
                    run_sum, run_tokens = 0.0, 0
                    if val_loss < best_loss:
                        best_loss = val_loss
                        best_weights = pack_params(model.config, model.params)
                        best_step = step
                        bad_evals = 0
                    else:
                        bad_evals += 1
                        if bad_evals >= tc.patience:
                            done = True
                            break
                if tc.max_steps is not None and step >= tc.max_steps:
                    done = True
                    break
    finally:
        if history_fh:
            history_fh.close()
    if best_weights is None:
        # stopped before the first evaluation: checkpoint the current weights
        best_loss = _evaluate(model, val_items, tc.batch_size)
        best_weights = pack_params(model.config, model.params)
        best_step = step
    return Checkpoint(
        config=model.config,
        weights=best_weights,
        vocab_hash=vocab.content_hash(),
        step=best_step,
        best_val_loss=float(best_loss),
        vocab=vocab,
    )
