"""Reproducibility manifests for command-line runs.

A manifest records everything needed to repeat a run byte for byte: the
command, its resolved configuration, every seed, and content hashes of the
input files. Hashes use the git blob scheme (sha1 over ``blob <size>\\0`` plus
the content) so they can be cross-checked against a repository with
``git hash-object``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__


def blob_hash(data: bytes) -> str:
    """Git-style blob hash of raw bytes."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def hash_file(path) -> str:
    return blob_hash(Path(path).read_bytes())


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """One manifest per run; write() after finish() emits it as JSON."""

    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started: str = field(default_factory=_utc_now)
    finished: str | None = None
    version: str = __version__

    def add_input(self, name: str, path=None, data: bytes | None = None) -> None:
        """Record an input by file path or by raw content (for packaged or
        literal inputs that have no path)."""
        if (path is None) == (data is None):
            raise ValueError("pass exactly one of path or data")
        blob = hash_file(path) if path is not None else blob_hash(data)
        self.inputs[name] = {"path": None if path is None else str(path), "blob": blob}

    def finish(self, *outputs) -> "RunManifest":
        self.outputs = [str(p) for p in outputs]
        self.finished = _utc_now()
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
