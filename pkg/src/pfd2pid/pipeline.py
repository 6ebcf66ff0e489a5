"""Dataset plumbing: (PFD, P&ID) pair records with JSONL persistence,
deterministic splitting, paired augmentation, and top-k evaluation of ranked
model predictions."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field

from .codec import (
    RANDOM_MODE,
    BranchOrderPolicy,
    ParseError,
    SfilesString,
    _digest,
    canonicalize,
    parse,
    serialize,
)
from .graph import CONTROLLER_CLASS, VALVE_CLASS, strip_controls


class SplitError(ValueError):
    """A requested nonzero split fraction produced an empty bucket."""


class LengthMismatch(ValueError):
    """Predictions, targets, and optional inputs disagree in sample count."""


@dataclass(frozen=True)
class DatasetPair:
    """One training sample: a PFD string and its control-annotated P&ID."""

    id: int
    pfd_sfiles: SfilesString
    pid_sfiles: SfilesString

    def to_json_line(self) -> str:
        return json.dumps(
            {"id": self.id, "pfd": self.pfd_sfiles.text, "pid": self.pid_sfiles.text},
            separators=(",", ":"),
        )

    @classmethod
    def from_json_line(cls, line: str) -> "DatasetPair":
        d = json.loads(line)
        return cls(
            id=int(d["id"]),
            pfd_sfiles=SfilesString(d["pfd"]),
            pid_sfiles=SfilesString(d["pid"]),
        )


def save_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json_line() + "\n")


def load_pairs(path) -> list[DatasetPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(DatasetPair.from_json_line(line))
    return out


def strip_string(s, remove_valves: bool = False) -> SfilesString:
    """Parse, remove the control structure, and re-serialize canonically."""
    return serialize(strip_controls(parse(s), remove_valves=remove_valves))


# -- splitting ----------------------------------------------------------------


def split(pairs, fractions, seed: int):
    """Shuffle deterministically and split into (train, val, test).

    Bucket sizes: val and test get floor(n * fraction); train takes the
    remainder. A nonzero fraction that floors to zero raises SplitError;
    fractions of exactly zero are legal and give empty buckets.
    """
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    if min(f_train, f_val, f_test) < 0:
        raise ValueError("fractions must be non-negative")
    pairs = list(pairs)
    n = len(pairs)
    n_val = math.floor(n * f_val)
    n_test = math.floor(n * f_test)
    n_train = n - n_val - n_test
    for name, frac, size in (
        ("train", f_train, n_train),
        ("val", f_val, n_val),
        ("test", f_test, n_test),
    ):
        if frac > 0 and size == 0:
            raise SplitError(f"{name} split is empty (n={n}, fraction={frac})")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    shuffled = [pairs[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]
    return train, val, test


# -- augmentation -------------------------------------------------------------


def augment_dataset(pairs, seed: int) -> list[DatasetPair]:
    """Add one re-serialized variant per pair, with the same seeded branch
    decisions applied to the PFD and the P&ID so the sides stay aligned.
    Variants that duplicate an existing pair are dropped, so the result has
    between n and 2n pairs."""
    pairs = list(pairs)
    out = list(pairs)
    seen = {(p.pfd_sfiles.text, p.pid_sfiles.text) for p in pairs}
    next_id = max((p.id for p in pairs), default=-1) + 1
    for p in pairs:
        policy = BranchOrderPolicy(RANDOM_MODE, _digest(seed, "pair", p.id))
        new_pfd = serialize(parse(p.pfd_sfiles), policy)
        new_pid = serialize(parse(p.pid_sfiles), policy)
        key = (new_pfd.text, new_pid.text)
        if key in seen:
            continue
        seen.add(key)
        out.append(DatasetPair(next_id, new_pfd, new_pid))
        next_id += 1
    return out


# -- evaluation ---------------------------------------------------------------

ERROR_CATEGORIES = ("invalid_sfiles", "dangling_recycle", "dangling_signal", "unit_mismatch")


@dataclass(frozen=True)
class EvalReport:
    k_max: int
    n_samples: int
    top_k_accuracy: dict[int, float]
    raw_top_k_accuracy: dict[int, float]
    n_invalid_predictions: int
    error_breakdown: dict[str, int]

    def __post_init__(self):
        last = 0.0
        for k in range(1, self.k_max + 1):
            acc = self.top_k_accuracy[k]
            if not 0.0 <= acc <= 1.0 or acc < last:
                raise ValueError("top-k accuracy must be monotone within [0, 1]")
            last = acc

    def to_json_dict(self) -> dict:
        return {
            "k_max": self.k_max,
            "n_samples": self.n_samples,
            "top_k_accuracy": {str(k): v for k, v in self.top_k_accuracy.items()},
            "raw_top_k_accuracy": {
                str(k): v for k, v in self.raw_top_k_accuracy.items()
            },
            "n_invalid_predictions": self.n_invalid_predictions,
            "error_breakdown": dict(self.error_breakdown),
        }

    def format_table(self) -> str:
        """Plain-text accuracy table: one row per k, canonical and raw-string
        match percentages."""
        lines = [
            f"samples: {self.n_samples}    invalid predictions: {self.n_invalid_predictions}",
            "k    top-k accuracy    raw-string accuracy",
        ]
        for k in range(1, self.k_max + 1):
            lines.append(
                f"{k:<5}{self.top_k_accuracy[k] * 100:>7.1f}%      "
                f"{self.raw_top_k_accuracy[k] * 100:>10.1f}%"
            )
        lines.append(
            "errors (top-1): "
            + ", ".join(f"{c}={self.error_breakdown[c]}" for c in ERROR_CATEGORIES)
        )
        return "\n".join(lines)


def _unit_counts(g) -> Counter:
    """Unit-class multiset ignoring controllers and valves, the units shared
    by a PFD and a correct P&ID in either valve mode."""
    return Counter(
        n.unit_class
        for n in g.nodes
        if n.unit_class not in (CONTROLLER_CLASS, VALVE_CLASS)
    )


def evaluate_top_k(predictions, targets, k_max: int, input_pfds=None) -> EvalReport:
    """Score ranked prediction lists against canonical targets.

    A sample counts as a hit at k when any of its first k predictions
    canonicalizes to the target string. Unparseable predictions never match
    and are tallied in n_invalid_predictions. The error breakdown classifies
    each failed top-1 prediction: parse failures by their category, parseable
    misses by comparing the non-control unit multiset against the input PFD
    (against the target when inputs are not supplied); topology-only misses
    fall outside the four categories.
    """
    predictions = list(predictions)
    targets = list(targets)
    if len(predictions) != len(targets):
        raise LengthMismatch(
            f"{len(predictions)} prediction lists vs {len(targets)} targets"
        )
    if input_pfds is not None:
        input_pfds = list(input_pfds)
        if len(input_pfds) != len(targets):
            raise LengthMismatch(
                f"{len(input_pfds)} inputs vs {len(targets)} targets"
            )
    if k_max < 1:
        raise ValueError("k_max must be >= 1")

    n = len(targets)
    hits = [0] * (k_max + 1)
    raw_hits = [0] * (k_max + 1)
    n_invalid = 0
    breakdown = {c: 0 for c in ERROR_CATEGORIES}

    for i, (ranked, target) in enumerate(zip(predictions, targets)):
        ranked = list(ranked)[:k_max]
        target_text = _as_text(target)
        match_rank = None
        raw_rank = None
        top1_error: str | None = None
        for r, pred in enumerate(ranked, start=1):
            text = _as_text(pred)
            if raw_rank is None and text == target_text:
                raw_rank = r
            try:
                canon = canonicalize(text).text
            except ParseError as exc:
                n_invalid += 1
                if r == 1:
                    top1_error = exc.category
                continue
            if canon == target_text:
                if match_rank is None:
                    match_rank = r
            elif r == 1:
                reference = input_pfds[i] if input_pfds is not None else target
                try:
                    ref_counts = _unit_counts(parse(reference))
                except ParseError:
                    ref_counts = None
                if ref_counts is not None and _unit_counts(parse(text)) != ref_counts:
                    top1_error = "unit_mismatch"
        if match_rank is not None:
            hits[match_rank] += 1
        if raw_rank is not None:
            raw_hits[raw_rank] += 1
        if match_rank != 1 and top1_error is not None:
            breakdown[top1_error] += 1

    def accumulate(buckets):
        acc = {}
        running = 0
        for k in range(1, k_max + 1):
            running += buckets[k]
            acc[k] = running / n if n else 0.0
        return acc

    return EvalReport(
        k_max=k_max,
        n_samples=n,
        top_k_accuracy=accumulate(hits),
        raw_top_k_accuracy=accumulate(raw_hits),
        n_invalid_predictions=n_invalid,
        error_breakdown=breakdown,
    )


def _as_text(s) -> str:
    return s.text if isinstance(s, SfilesString) else str(s)
