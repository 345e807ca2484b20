"""Transfer-aware neural architecture search on a cell-based search space.

The surrogate couples a sequence autoencoder over genome token sequences
with a performance predictor that splits into a universal head shared by
all tasks plus per-task residual heads, letting a new search start from
knowledge gathered on other tasks. A seeded synthetic multi-task oracle
makes the transfer experiments reproducible on a CPU in minutes.
"""

from .archspace import (
    Block,
    Cell,
    Genome,
    GenomeFormatError,
    Operation,
    OPERATIONS,
    detokenize,
    fingerprint,
    genome_from_json,
    genome_to_json,
    loose_ends,
    sample_genome,
    tokenize,
)
from .search import SearchConfig, SearchReport, latent_ascend, select_starts, xfernas_search
from .taskbench import (
    ObservationHistory,
    ObservationRecord,
    TaskSuite,
    build_source_knowledge,
    features,
    load_history,
    oracle_eval,
    pearson,
    save_history,
)
from .xfernet import UNIVERSAL, ArchitectureCode, TrainConfig, XferNet

__all__ = [
    "Block",
    "Cell",
    "Genome",
    "GenomeFormatError",
    "Operation",
    "OPERATIONS",
    "sample_genome",
    "genome_to_json",
    "genome_from_json",
    "tokenize",
    "detokenize",
    "loose_ends",
    "fingerprint",
    "ObservationHistory",
    "ObservationRecord",
    "TaskSuite",
    "build_source_knowledge",
    "features",
    "oracle_eval",
    "pearson",
    "save_history",
    "load_history",
    "ArchitectureCode",
    "TrainConfig",
    "XferNet",
    "UNIVERSAL",
    "SearchConfig",
    "SearchReport",
    "select_starts",
    "latent_ascend",
    "xfernas_search",
]

__version__ = "0.1.0"
