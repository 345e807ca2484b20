"""Cell-based architecture search space.

An architecture (genome) is a pair of cells: a normal cell and a reduction
cell. Each cell is built from B blocks; block b picks two inputs among the
two cell inputs (node indices 0 and 1) and the outputs of earlier blocks
(node indices 2 .. b), applies one operation to each, and sums the results.
The cell output is the concatenation of all block outputs that no other
block consumes ("loose ends").

Genomes serialize to a JSON dag format (``conv_dag`` / ``reduc_dag`` with
``node_k`` entries) and to a flat integer token sequence used by the
sequence surrogate.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

__all__ = [
    "Operation",
    "OPERATIONS",
    "Block",
    "Cell",
    "Genome",
    "GenomeFormatError",
    "sample_genome",
    "genome_to_json",
    "genome_from_json",
    "tokenize",
    "detokenize",
    "loose_ends",
    "fingerprint",
    "vocab_size",
    "seq_length",
]

NUM_OPERATIONS = 19

# Canonical operation order. The set of operations is fixed by the search
# space; the order here defines the stable id <-> name mapping used by the
# token vocabulary.
_OPERATION_NAMES = (
    "identity",
    "conv 1x1",
    "conv 3x3",
    "conv 1x3+3x1",
    "conv 1x7+7x1",
    "max_pool 2x2",
    "max_pool 3x3",
    "max_pool 5x5",
    "max_pool 7x7",
    "min_pool 2x2",
    "avg_pool 2x2",
    "avg_pool 3x3",
    "avg_pool 5x5",
    "sep_conv 3x3",
    "sep_conv 5x5",
    "sep_conv 7x7",
    "dil_sep_conv 3x3",
    "dil_sep_conv 5x5",
    "dil_sep_conv 7x7",
)


class GenomeFormatError(ValueError):
    """Raised when genome JSON or a token sequence is malformed."""


@dataclass(frozen=True)
class Operation:
    """One of the 19 primitive operations a block may apply."""

    id: int
    name: str

    @staticmethod
    def by_id(op_id: int) -> "Operation":
        if not 0 <= op_id < NUM_OPERATIONS:
            raise GenomeFormatError(f"operation id {op_id} outside [0, {NUM_OPERATIONS})")
        return OPERATIONS[op_id]

    @staticmethod
    def by_name(name: str) -> "Operation":
        op = _OP_BY_NAME.get(name)
        if op is None:
            raise GenomeFormatError(f"unknown operation {name!r}")
        return op


OPERATIONS: tuple[Operation, ...] = tuple(
    Operation(i, name) for i, name in enumerate(_OPERATION_NAMES)
)
_OP_BY_NAME = {op.name: op for op in OPERATIONS}


@dataclass(frozen=True)
class Block:
    """One block: two (input node, operation) pairs whose results are summed.

    ``input1``/``input2`` are node indices: 0 and 1 are the two cell inputs,
    node index k >= 2 is the output of block k-1. Block b (1-based) may only
    reference node indices < b + 1.
    """

    input1: int
    input2: int
    op1: Operation
    op2: Operation


@dataclass(frozen=True)
class Cell:
    kind: str  # "normal" | "reduction"
    blocks: tuple[Block, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("normal", "reduction"):
            raise GenomeFormatError(f"cell kind must be normal or reduction, got {self.kind!r}")
        for b, block in enumerate(self.blocks, start=1):
            for inp in (block.input1, block.input2):
                if not 0 <= inp < b + 1:
                    raise GenomeFormatError(
                        f"block {b} input {inp} outside legal range [0, {b + 1})"
                    )


@dataclass(frozen=True)
class Genome:
    """A normal/reduction cell pair; ``meta`` carries optional training-time
    hyperparameter annotations (B, N, F) and is excluded from equality."""

    normal: Cell
    reduction: Cell
    meta: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.normal.kind != "normal" or self.reduction.kind != "reduction":
            raise GenomeFormatError("genome cells must be (normal, reduction)")
        if len(self.normal.blocks) != len(self.reduction.blocks):
            raise GenomeFormatError("normal and reduction cells must share B")

    @property
    def num_blocks(self) -> int:
        return len(self.normal.blocks)


def vocab_size(num_blocks: int) -> int:
    """Token vocabulary size: input tokens 0..B plus 19 operation tokens."""
    return num_blocks + 1 + NUM_OPERATIONS


def seq_length(num_blocks: int) -> int:
    """Token sequence length for a genome: 2 cells x B blocks x 4 tokens."""
    return 2 * num_blocks * 4


def sample_genome(seed: int, num_blocks: int = 5) -> Genome:
    """Sample a genome uniformly: per block, inputs uniform over the legal
    node range and operations uniform over the 19 primitives."""
    if num_blocks < 1:
        raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
    rng = random.Random(seed)

    def draw_cell(kind: str) -> Cell:
        blocks = []
        for b in range(1, num_blocks + 1):
            input1 = rng.randrange(b + 1)
            op1 = OPERATIONS[rng.randrange(NUM_OPERATIONS)]
            input2 = rng.randrange(b + 1)
            op2 = OPERATIONS[rng.randrange(NUM_OPERATIONS)]
            blocks.append(Block(input1, input2, op1, op2))
        return Cell(kind, tuple(blocks))

    return Genome(draw_cell("normal"), draw_cell("reduction"))


def _cell_to_dag(cell: Cell) -> dict:
    dag = {
        "node_1": ["node_1", None, None, None, None],
        "node_2": ["node_2", None, None, None, None],
    }
    for b, block in enumerate(cell.blocks, start=1):
        name = f"node_{b + 2}"
        dag[name] = [
            name,
            f"node_{block.input1 + 1}",
            f"node_{block.input2 + 1}",
            block.op1.name,
            block.op2.name,
        ]
    return dag


def genome_to_json(genome: Genome) -> str:
    """Serialize to the dag JSON format (sorted keys, 2-space indent)."""
    payload = {
        "conv_dag": _cell_to_dag(genome.normal),
        "reduc_dag": _cell_to_dag(genome.reduction),
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def _node_index(name: object, node: str) -> int:
    if not isinstance(name, str) or not name.startswith("node_"):
        raise GenomeFormatError(f"{node}: bad node reference {name!r}")
    try:
        k = int(name[5:])
    except ValueError:
        raise GenomeFormatError(f"{node}: bad node reference {name!r}") from None
    if k < 1:
        raise GenomeFormatError(f"{node}: bad node reference {name!r}")
    return k - 1


def _cell_from_dag(dag: dict, kind: str, label: str) -> Cell:
    if not isinstance(dag, dict):
        raise GenomeFormatError(f"{label} must be an object")
    num_nodes = len(dag)
    if num_nodes < 3:
        raise GenomeFormatError(f"{label} needs at least one block node")
    blocks = []
    for k in range(3, num_nodes + 1):
        node = f"node_{k}"
        entry = dag.get(node)
        if entry is None:
            raise GenomeFormatError(f"{label}: missing {node}")
        if not isinstance(entry, list) or len(entry) != 5:
            raise GenomeFormatError(f"{label}: {node} must be a 5-element list")
        own, in1, in2, op1, op2 = entry
        if own != node:
            raise GenomeFormatError(f"{label}: {node} lists name {own!r}")
        idx1 = _node_index(in1, node)
        idx2 = _node_index(in2, node)
        block_no = k - 2
        for idx, ref in ((idx1, in1), (idx2, in2)):
            if idx >= block_no + 1:
                raise GenomeFormatError(
                    f"{label}: {node} references {ref} which is not an earlier node"
                )
        try:
            blocks.append(Block(idx1, idx2, Operation.by_name(op1), Operation.by_name(op2)))
        except GenomeFormatError as exc:
            raise GenomeFormatError(f"{label}: {node}: {exc}") from None
    return Cell(kind, tuple(blocks))


def genome_from_json(text: str) -> Genome:
    """Parse the dag JSON format back into a genome.

    Rejects unknown operation names, forward node references, and malformed
    node entries, naming the offending node in the error message.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeFormatError(f"invalid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise GenomeFormatError("top level must be an object")
    for key in ("conv_dag", "reduc_dag"):
        if key not in payload:
            raise GenomeFormatError(f"missing {key}")
    normal = _cell_from_dag(payload["conv_dag"], "normal", "conv_dag")
    reduction = _cell_from_dag(payload["reduc_dag"], "reduction", "reduc_dag")
    return Genome(normal, reduction)


def tokenize(genome: Genome) -> tuple[int, ...]:
    """Flatten a genome to tokens: per block [input1, op1, input2, op2],
    normal cell first. Input tokens are node indices; operation op maps to
    token B + 1 + op.id."""
    num_blocks = genome.num_blocks
    op_base = num_blocks + 1
    tokens: list[int] = []
    for cell in (genome.normal, genome.reduction):
        for block in cell.blocks:
            tokens.extend(
                (block.input1, op_base + block.op1.id, block.input2, op_base + block.op2.id)
            )
    return tuple(tokens)


def detokenize(tokens: Iterable[int]) -> Genome:
    """Inverse of :func:`tokenize`; validates every token against the
    position-dependent legal range."""
    seq = tuple(int(t) for t in tokens)
    if len(seq) % 8 != 0 or len(seq) == 0:
        raise GenomeFormatError(f"token sequence length {len(seq)} is not 8*B")
    num_blocks = len(seq) // 8
    op_base = num_blocks + 1

    def read_block(chunk: tuple[int, ...], b: int) -> Block:
        in1, op1, in2, op2 = chunk
        for inp in (in1, in2):
            if not 0 <= inp < b + 1:
                raise GenomeFormatError(
                    f"input token {inp} illegal for block {b} (must be < {b + 1})"
                )
        for op in (op1, op2):
            if not op_base <= op < op_base + NUM_OPERATIONS:
                raise GenomeFormatError(f"token {op} is not an operation token for block {b}")
        return Block(in1, in2, OPERATIONS[op1 - op_base], OPERATIONS[op2 - op_base])

    cells = []
    for kind, offset in (("normal", 0), ("reduction", 4 * num_blocks)):
        blocks = tuple(
            read_block(seq[offset + 4 * (b - 1) : offset + 4 * b], b)
            for b in range(1, num_blocks + 1)
        )
        cells.append(Cell(kind, blocks))
    return Genome(cells[0], cells[1])


def loose_ends(cell: Cell) -> set[int]:
    """Node indices of blocks whose output no other block consumes."""
    consumed = set()
    for block in cell.blocks:
        consumed.add(block.input1)
        consumed.add(block.input2)
    return {b + 1 for b in range(1, len(cell.blocks) + 1)} - consumed


def fingerprint(genome: Genome) -> str:
    """Canonical digest of the token sequence; stable across processes."""
    tokens = tokenize(genome)
    payload = f"{genome.num_blocks}:" + ",".join(map(str, tokens))
    return hashlib.sha256(payload.encode("ascii")).hexdigest()
