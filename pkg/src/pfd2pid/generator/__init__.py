"""Synthetic (PFD, P&ID) pair generation from a pattern library."""

from .engine import (
    GenerationError,
    GeneratorConfig,
    generate_dataset,
    generate_pid,
    load_library,
)

__all__ = [
    "GenerationError",
    "GeneratorConfig",
    "generate_dataset",
    "generate_pid",
    "load_library",
]
