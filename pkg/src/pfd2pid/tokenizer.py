"""Token-level view of SFILES 2.0 strings and the model vocabulary."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

# One alternation per surface form: units, braces, signal/recycle references,
# brackets, incoming-branch delimiters, stream separator, reserved & and |,
# bare recycle digits. Order matters: earlier alternatives win.
TOKEN_PATTERN = (
    r"(\(.+?\)|\{.+?\}|[<%_]+\d+|\]|\[|<\&\||(?<!<)\&\||n\||(?<!\&)(?<!n)\||\&(?!\|)|\d)"
)
_TOKEN_RE = re.compile(TOKEN_PATTERN)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class TokenizeError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DecodeError(ValueError):
    pass


def tokenize(s: str) -> list[str]:
    """Split an SFILES 2.0 string into tokens.

    Every character must be consumed by some alternative; anything the scan
    skips (or a non-ASCII input) is an error rather than silently dropped.
    """
    if not s:
        raise TokenizeError("empty string", 0)
    if not s.isascii():
        raise TokenizeError("non-ASCII character", _first_non_ascii(s))
    tokens = []
    pos = 0
    for m in _TOKEN_RE.finditer(s):
        if m.start() != pos:
            raise TokenizeError(f"unconsumed character {s[pos]!r}", pos)
        tokens.append(m.group(0))
        pos = m.end()
    if pos != len(s):
        raise TokenizeError(f"unconsumed character {s[pos]!r}", pos)
    return tokens


def _first_non_ascii(s: str) -> int:
    for i, ch in enumerate(s):
        if not ch.isascii():
            return i
    return len(s)


def tokenize_spans(s: str) -> list[tuple[str, int]]:
    """Like tokenize but pairs every token with its byte offset, for parsers
    that need to report error positions."""
    tokens = tokenize(s)
    spans = []
    pos = 0
    for tok in tokens:
        spans.append((tok, pos))
        pos += len(tok)
    return spans


def detokenize(tokens) -> str:
    return "".join(tokens)


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->id map with dense ids: 4 specials then sorted tokens."""

    tokens: tuple[str, ...]  # content tokens in id order (build() sorts them)

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        """corpus: iterable of token sequences. Sorting makes the mapping
        independent of corpus order."""
        seen = set()
        for seq in corpus:
            seen.update(seq)
        if not seen:
            raise ValueError("empty corpus")
        if seen & set(SPECIALS):
            raise ValueError("corpus contains reserved special tokens")
        return cls(tokens=tuple(sorted(seen)))

    def __post_init__(self):
        mapping = {}
        for i, tok in enumerate(SPECIALS + self.tokens):
            if tok in mapping:
                raise ValueError(f"duplicate token {tok!r}")
            mapping[tok] = i
        object.__setattr__(self, "_token_to_id", mapping)
        object.__setattr__(self, "_id_to_token", SPECIALS + self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def size(self) -> int:
        """Total number of ids, specials included."""
        return len(self.tokens) + len(SPECIALS)

    @property
    def n_tokens(self) -> int:
        """Content tokens only (the size reported in dataset statistics)."""
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def encode(self, tokens) -> tuple[list[int], list[int]]:
        """Map tokens to ids. Returns (ids, positions that fell back to UNK);
        encoding never fails, so out-of-vocabulary data is detected upstream."""
        ids, unk_positions = [], []
        for i, tok in enumerate(tokens):
            tid = self._token_to_id.get(tok)
            if tid is None:
                tid = self.unk_id
                unk_positions.append(i)
            ids.append(tid)
        return ids, unk_positions

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < self.size:
                raise DecodeError(f"id {i} out of range [0, {self.size})")
            out.append(self._id_to_token[i])
        return out

    def content_hash(self) -> str:
        """Stable digest of the full mapping, stored in checkpoints."""
        payload = "\n".join(SPECIALS + self.tokens).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in SPECIALS + self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        lines = [line for line in lines if line]
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError(f"vocab file must start with the special lines {SPECIALS}")
        return cls(tokens=tuple(lines[4:]))
