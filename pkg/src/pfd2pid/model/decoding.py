"""Greedy and beam-search decoding with incremental KV caching.

Decoding always runs in double precision so that a hypothesis log-probability
can be reproduced by re-scoring the returned sequence with a full forward
pass. Candidate ties break toward the lowest token id, which makes beam width
one reproduce greedy decoding exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tokenizer import Vocabulary, detokenize, tokenize
from .config import BOS_ID, EOS_ID
from .layers import log_softmax
from .transformer import Transformer


@dataclass(frozen=True)
class BeamHypothesis:
    """A decoded sequence with its accumulated log-probability; finished
    means the sequence ends with EOS rather than hitting the length cap."""

    token_ids: tuple[int, ...]
    log_prob: float
    finished: bool

    def __post_init__(self):
        if self.log_prob > 0.0:
            raise ValueError(f"log-probability must be <= 0, got {self.log_prob}")
        ends_eos = bool(self.token_ids) and self.token_ids[-1] == EOS_ID
        if self.finished != ends_eos:
            raise ValueError("finished must mirror a trailing EOS token")


def _as_float64(model: Transformer) -> Transformer:
    return model if model.dtype == np.float64 else model.astype(np.float64)


def _step_limit(model: Transformer, max_len: int | None) -> int:
    if max_len is None:
        return model.config.max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return min(max_len, model.config.max_len)


def decode_greedy(model: Transformer, src_ids, max_len: int | None = None) -> list[int]:
    """Highest-probability token at each step; stops at EOS or max_len. The
    returned ids exclude BOS and include the final EOS when one was emitted."""
    model = _as_float64(model)
    limit = _step_limit(model, max_len)
    state = model.init_decode_state(src_ids)
    out: list[int] = []
    prev = BOS_ID
    for _ in range(limit):
        log_probs = model.decode_step(state, prev)
        prev = int(np.argmax(log_probs))
        out.append(prev)
        if prev == EOS_ID:
            break
    return out


def decode_beam(
    model: Transformer, src_ids, beam_width: int = 5, max_len: int | None = None
) -> list[BeamHypothesis]:
    """Beam search over full-vocabulary expansions.

    Returns at most beam_width hypotheses sorted by descending log-probability.
    A hypothesis finishes on EOS. Because every step adds a log-probability
    <= 0, a beam's total never improves with length, so the search stops once
    beam_width hypotheses have finished and the best live beam can no longer
    beat the beam_width-th best finished score. At the length cap surviving
    beams are returned unfinished. No length normalization is applied.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    model = _as_float64(model)
    limit = _step_limit(model, max_len)
    # live beams as (log_prob, token_ids, previous token, decode state)
    live = [(0.0, (), BOS_ID, model.init_decode_state(src_ids))]
    finished: list[BeamHypothesis] = []
    for _ in range(limit):
        if not live:
            break
        candidates = []
        for beam_index, (total, _, prev, state) in enumerate(live):
            step_log_probs = model.decode_step(state, prev)
            for token in range(step_log_probs.shape[0]):
                candidates.append((-(total + float(step_log_probs[token])), token, beam_index))
        candidates.sort()
        next_live = []
        for neg_total, token, beam_index in candidates:
            _, ids, _, state = live[beam_index]
            if token == EOS_ID:
                finished.append(BeamHypothesis(ids + (EOS_ID,), -neg_total, True))
            else:
                next_live.append(
                    (-neg_total, ids + (token,), token, Transformer.clone_decode_state(state))
                )
                # candidates ranked below the last kept beam are dropped,
                # EOS included, so width one follows the greedy path exactly
                if len(next_live) >= beam_width:
                    break
        live = next_live
        if len(finished) >= beam_width:
            cutoff = sorted(h.log_prob for h in finished)[-beam_width]
            if not live or live[0][0] <= cutoff:
                break
    if len(finished) < beam_width:
        finished.extend(
            BeamHypothesis(ids, total, False) for total, ids, _, _ in live if ids
        )
    finished.sort(key=lambda h: (-h.log_prob, h.token_ids))
    return finished[:beam_width]


def sequence_log_prob(model: Transformer, src_ids, token_ids) -> float:
    """Teacher-forcing log-probability of token_ids given src_ids, with BOS
    prepended internally; the re-scoring oracle for decoded hypotheses."""
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("cannot score an empty sequence")
    model = _as_float64(model)
    src = np.asarray(src_ids)
    if src.ndim != 1:
        raise ValueError("sequence_log_prob expects a single source sequence")
    tgt_in = np.array([[BOS_ID, *token_ids[:-1]]])
    logits = model.forward(src[None, :], tgt_in)[0]
    log_probs = log_softmax(logits)
    return float(sum(log_probs[t, tok] for t, tok in enumerate(token_ids)))


def ids_to_text(token_ids, vocab: Vocabulary) -> str:
    """Render decoded ids as an SFILES string, dropping one trailing EOS.
    Any other special token is rendered literally so invalid output stays
    visibly invalid downstream."""
    ids = list(token_ids)
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return detokenize(vocab.decode(ids))


def translate(
    model: Transformer,
    vocab: Vocabulary,
    sfiles: str,
    *,
    beam_width: int = 5,
    top_k: int = 5,
    max_len: int | None = None,
) -> list[tuple[str, float, bool]]:
    """Beam-decode a flowsheet string into ranked (text, log_prob, finished)
    candidates. Out-of-vocabulary input tokens fall back to UNK."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    ids, _ = vocab.encode(tokenize(sfiles))
    src = np.array(ids + [EOS_ID])
    hyps = decode_beam(model, src, beam_width=max(beam_width, top_k), max_len=max_len)
    return [(ids_to_text(h.token_ids, vocab), h.log_prob, h.finished) for h in hyps[:top_k]]
