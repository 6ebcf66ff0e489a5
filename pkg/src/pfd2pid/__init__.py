"""pfd2pid: predicting control structure for process flow diagrams.

Pipeline: synthesize (PFD, P&ID) flowsheet pairs, serialize them as
SFILES 2.0 strings, train a small encoder-decoder transformer to translate
PFD strings into P&ID strings, and evaluate top-k accuracy of beam-searched
predictions.
"""

from .codec import (
    CANONICAL,
    BranchOrderPolicy,
    ParseError,
    SerializeError,
    SfilesString,
    augment,
    canonicalize,
    parse,
    serialize,
)
from .graph import (
    DatasetStats,
    EmptyDataset,
    FlowEdge,
    FlowsheetGraph,
    GraphError,
    StripError,
    UnitNode,
    isomorphic,
    stats,
    strip_controls,
)
from .generator import (
    GenerationError,
    GeneratorConfig,
    generate_dataset,
    generate_pid,
    load_library,
)
from .pipeline import (
    DatasetPair,
    EvalReport,
    LengthMismatch,
    SplitError,
    augment_dataset,
    evaluate_top_k,
    load_pairs,
    save_pairs,
    split,
    strip_string,
)
from .tokenizer import (
    DecodeError,
    TokenizeError,
    Vocabulary,
    detokenize,
    tokenize,
)

__version__ = "0.1.0"

__all__ = [
    "BranchOrderPolicy",
    "CANONICAL",
    "DatasetPair",
    "DatasetStats",
    "DecodeError",
    "EmptyDataset",
    "EvalReport",
    "FlowEdge",
    "FlowsheetGraph",
    "GenerationError",
    "GeneratorConfig",
    "GraphError",
    "LengthMismatch",
    "ParseError",
    "SerializeError",
    "SfilesString",
    "SplitError",
    "StripError",
    "TokenizeError",
    "UnitNode",
    "Vocabulary",
    "augment",
    "augment_dataset",
    "canonicalize",
    "detokenize",
    "evaluate_top_k",
    "generate_dataset",
    "generate_pid",
    "isomorphic",
    "load_library",
    "load_pairs",
    "parse",
    "save_pairs",
    "serialize",
    "split",
    "stats",
    "strip_controls",
    "strip_string",
    "tokenize",
]
