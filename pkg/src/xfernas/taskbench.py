"""Synthetic multi-task benchmark oracle and observation histories.

Real architecture evaluation means training a deep model for hours; this
module stands in with a deterministic synthetic family that keeps the one
property the transfer machinery relies on: all tasks share a universal
score component, with task-specific deviations whose strength is the
``tau`` knob. Scores are sigmoid(<w_u, phi(g)> + tau * <w_task, phi(g)> +
b_task + eps) over fixed genome features phi, with eps a per-(task, genome)
deterministic noise draw, so every experiment is exactly reproducible.

Features are deliberately different in kind from the surrogate's learned
sequence representation: per-cell operation histograms plus a topology
statistic, pushed through a fixed random projection.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .archspace import (
    NUM_OPERATIONS,
    Genome,
    fingerprint,
    genome_from_json,
    genome_to_json,
    sample_genome,
)

__all__ = [
    "ObservationRecord",
    "ObservationHistory",
    "TaskSuite",
    "HistoryFormatError",
    "features",
    "oracle_eval",
    "build_source_knowledge",
    "save_history",
    "load_history",
    "pearson",
]


class HistoryFormatError(ValueError):
    """Raised for malformed observation-history files."""


FEATURE_DIM = 32
_RAW_DIM = 2 * NUM_OPERATIONS + 2
# Fixed random projection from raw descriptors to the feature space. The
# scale is chosen so scores of random genomes spread well inside (0, 1)
# instead of collapsing around 0.5.
_PROJECTION_SEED = 709
_PROJECTION_SCALE = 10.0
_PROJECTION = (
    np.random.default_rng(_PROJECTION_SEED).standard_normal((_RAW_DIM, FEATURE_DIM))
    * _PROJECTION_SCALE
    / np.sqrt(_RAW_DIM)
)


def features(genome: Genome) -> np.ndarray:
    """32-dim feature vector: per-cell operation histograms (count
    normalized) and per-cell mean input-index gap, randomly projected."""
    raw = np.zeros(_RAW_DIM)
    num_blocks = genome.num_blocks
    for c, cell in enumerate((genome.normal, genome.reduction)):
        hist = raw[c * NUM_OPERATIONS : (c + 1) * NUM_OPERATIONS]
        gap = 0.0
        for b, block in enumerate(cell.blocks, start=1):
            hist[block.op1.id] += 1.0
            hist[block.op2.id] += 1.0
            gap += (b + 1 - block.input1) + (b + 1 - block.input2)
        hist /= 2.0 * num_blocks
        raw[2 * NUM_OPERATIONS + c] = gap / (2.0 * num_blocks)
    return raw @ _PROJECTION


@dataclass(frozen=True)
class ObservationRecord:
    task: str
    genome: Genome
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class ObservationHistory:
    """Evaluation records grouped by task, with an ordered task registry.

    Fingerprints are unique per task; the registry keeps every task ever
    registered or appended, in first-appearance order. ``target`` marks the
    designated target task when one is known.
    """

    def __init__(self, target: Optional[str] = None):
        self._records: dict[str, list[ObservationRecord]] = {}
        self._fps: dict[str, set[str]] = {}
        self.target = target
        if target is not None:
            self.register_task(target)

    def register_task(self, task: str) -> None:
        if task not in self._records:
            self._records[task] = []
            self._fps[task] = set()

    @property
    def registry(self) -> list[str]:
        return list(self._records)

    def append(self, record: ObservationRecord) -> None:
        self.register_task(record.task)
        fp = fingerprint(record.genome)
        if fp in self._fps[record.task]:
            raise ValueError(f"duplicate genome for task {record.task!r}")
        self._fps[record.task].add(fp)
        self._records[record.task].append(record)

    def extend(self, records: Iterable[ObservationRecord]) -> None:
        for record in records:
            self.append(record)

    def records(self, task: str) -> list[ObservationRecord]:
        return list(self._records.get(task, ()))

    def all_records(self) -> list[ObservationRecord]:
        out: list[ObservationRecord] = []
        for task in self._records:
            out.extend(self._records[task])
        return out

    def counts(self) -> dict[str, int]:
        return {task: len(recs) for task, recs in self._records.items()}

    def fingerprints(self) -> set[str]:
        out: set[str] = set()
        for fps in self._fps.values():
            out |= fps
        return out

    def source_tasks(self) -> list[str]:
        return [t for t in self._records if t != self.target]

    def copy(self) -> "ObservationHistory":
        other = ObservationHistory(target=self.target)
        for task in self._records:
            other.register_task(task)
            for record in self._records[task]:
                other.append(record)
        return other

    def __len__(self) -> int:
        return sum(len(r) for r in self._records.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObservationHistory):
            return NotImplemented
        return (
            self.registry == other.registry
            and self.target == other.target
            and all(self._records[t] == other._records[t] for t in self._records)
        )


class TaskSuite:
    """Seeded synthetic oracle over ``n_tasks`` tasks; the last task is the
    designated target, the rest are source tasks."""

    def __init__(self, seed: int, n_tasks: int, tau: float, noise_sigma: float = 0.01):
        if n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if tau < 0:
            raise ValueError("tau must be >= 0")
        self.seed = seed
        self.n_tasks = n_tasks
        self.tau = tau
        self.noise_sigma = noise_sigma
        self.task_ids = [f"task{i}" for i in range(n_tasks)]
        self.target_task = self.task_ids[-1]
        self.source_tasks = self.task_ids[:-1]

        rng = np.random.default_rng(seed)
        w = rng.standard_normal(FEATURE_DIM)
        self.w_universal = w / np.linalg.norm(w)
        self.w_task: dict[str, np.ndarray] = {}
        deltas: dict[str, float] = {}
        for task in self.task_ids:
            w = rng.standard_normal(FEATURE_DIM)
            self.w_task[task] = w / np.linalg.norm(w)
            deltas[task] = float(rng.normal(0.0, 0.25))
        # center logits on the mean feature vector of a probe sample so the
        # sigmoid is exercised in its informative range; at tau=0 every task
        # gets the same offset and therefore identical scores
        probe = np.stack(
            [
                features(sample_genome(int(rng.integers(2**31)), 5))
                for _ in range(256)
            ]
        )
        mean_phi = probe.mean(axis=0)
        center = -float(self.w_universal @ mean_phi)
        self.b_task = {
            task: center + tau * (deltas[task] - float(self.w_task[task] @ mean_phi))
            for task in self.task_ids
        }

    def _check_task(self, task: str) -> None:
        if task not in self.w_task:
            raise KeyError(f"unknown task {task!r}; suite tasks are {self.task_ids}")

    def evaluate(self, task: str, genome: Genome) -> float:
        return oracle_eval(self, task, genome)

    def descriptor(self) -> dict:
        return {
            "seed": self.seed,
            "n_tasks": self.n_tasks,
            "tau": self.tau,
            "noise_sigma": self.noise_sigma,
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.descriptor(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_descriptor(cls, desc: dict) -> "TaskSuite":
        return cls(
            seed=int(desc["seed"]),
            n_tasks=int(desc["n_tasks"]),
            tau=float(desc["tau"]),
            noise_sigma=float(desc.get("noise_sigma", 0.01)),
        )

    @classmethod
    def load(cls, path: str) -> "TaskSuite":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_descriptor(json.load(fh))


def oracle_eval(suite: TaskSuite, task: str, genome: Genome) -> float:
    """Deterministic synthetic score in (0, 1) for (suite, task, genome)."""
    suite._check_task(task)
    phi = features(genome)
    logit = float(suite.w_universal @ phi)
    logit += suite.tau * float(suite.w_task[task] @ phi)
    logit += suite.b_task[task]
    digest = hashlib.sha256(
        f"{suite.seed}|{task}|{fingerprint(genome)}".encode("ascii")
    ).digest()
    noise_rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    logit += float(noise_rng.normal()) * suite.noise_sigma
    return float(1.0 / (1.0 + np.exp(-logit)))


def build_source_knowledge(
    suite: TaskSuite, n_per_task: int, seed: int, num_blocks: int = 5
) -> ObservationHistory:
    """For each source task, evaluate ``n_per_task`` fresh random genomes on
    that task alone. All genomes are distinct across the whole history; the
    target task receives no records."""
    if n_per_task < 0:
        raise ValueError("n_per_task must be >= 0")
    history = ObservationHistory()
    rng = random.Random(seed)
    seen: set[str] = set()
    for task in suite.source_tasks:
        history.register_task(task)
        added = 0
        while added < n_per_task:
            genome = sample_genome(rng.randrange(2**63), num_blocks)
            fp = fingerprint(genome)
            if fp in seen:
                continue
            seen.add(fp)
            history.append(ObservationRecord(task, genome, oracle_eval(suite, task, genome)))
            added += 1
    return history


def save_history(history: ObservationHistory, path: str) -> None:
    """One JSON record per line: {"task", "score", "genome"} with the genome
    in the dag JSON format. Records are written in registry order."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in history.all_records():
            line = json.dumps(
                {
                    "task": record.task,
                    "score": record.score,
                    "genome": json.loads(genome_to_json(record.genome)),
                },
                sort_keys=True,
            )
            fh.write(line + "\n")


def load_history(path: str, target: Optional[str] = None) -> ObservationHistory:
    """Inverse of :func:`save_history`. The registry is rebuilt in line
    order; pass ``target`` to mark (and register) the target task."""
    history = ObservationHistory(target=target) if target is not None else ObservationHistory()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                task = payload["task"]
                score = payload["score"]
                genome = genome_from_json(json.dumps(payload["genome"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise HistoryFormatError(f"line {lineno}: {exc}") from None
            if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
                raise HistoryFormatError(f"line {lineno}: score {score!r} outside [0, 1]")
            history.append(ObservationRecord(task, genome, float(score)))
    return history


def pearson(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation coefficient; raises on mismatched lengths or
    zero variance."""
    x = np.asarray(pred, dtype=float)
    y = np.asarray(truth, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("correlation undefined: zero variance input")
    return float(dx @ dy / np.sqrt(vx * vy))
