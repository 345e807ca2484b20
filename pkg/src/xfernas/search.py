"""Two-phase surrogate search over the architecture space.

Round 1 trains the surrogate on source knowledge alone and proposes
candidates by gradient ascent in code space starting from the best source
architectures (the target residual head is still exactly zero then, so the
ascent follows the universal prediction). Later rounds retrain on the
combined history and start from the best target-task records. Every
proposal is decoded greedily, deduplicated against everything already
observed, and evaluated on the target oracle, never exceeding the
evaluation budget.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .archspace import (
    Genome,
    detokenize,
    fingerprint,
    genome_to_json,
    sample_genome,
    tokenize,
)
from .taskbench import ObservationHistory, ObservationRecord
from .xfernet import ArchitectureCode, TrainConfig, XferNet

__all__ = [
    "SearchConfig",
    "SearchError",
    "EvaluatedCandidate",
    "SearchReport",
    "select_starts",
    "latent_ascend",
    "xfernas_search",
]


class SearchError(RuntimeError):
    """Search failure; carries the partial report when evaluation aborted."""

    def __init__(self, message: str, report: Optional["SearchReport"] = None):
        super().__init__(message)
        self.report = report


@dataclass
class SearchConfig:
    budget: int = 33
    eta: float = 10.0
    max_ascent_steps: int = 10
    starts_per_round: int = 11
    rounds: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.rounds < 1 or self.starts_per_round < 1 or self.max_ascent_steps < 1:
            raise ValueError("rounds, starts_per_round, max_ascent_steps must be >= 1")


@dataclass
class EvaluatedCandidate:
    genome: Genome
    score: float
    round: int
    provenance: str  # "source-start" | "target-start" | "random"


@dataclass
class SearchReport:
    evaluated: list[EvaluatedCandidate] = field(default_factory=list)
    training_logs: list[list[float]] = field(default_factory=list)
    config: Optional[SearchConfig] = None
    aborted: Optional[str] = None

    @property
    def best(self) -> EvaluatedCandidate:
        if not self.evaluated:
            raise SearchError("no evaluations in report")
        return max(self.evaluated, key=lambda e: e.score)

    def to_dict(self) -> dict:
        cfg = None
        if self.config is not None:
            cfg = {
                "budget": self.config.budget,
                "eta": self.config.eta,
                "max_ascent_steps": self.config.max_ascent_steps,
                "starts_per_round": self.config.starts_per_round,
                "rounds": self.config.rounds,
                "seed": self.config.seed,
            }
        return {
            "format_version": 1,
            "config": cfg,
            "aborted": self.aborted,
            "best": None
            if not self.evaluated
            else {
                "score": self.best.score,
                "genome": json.loads(genome_to_json(self.best.genome)),
            },
            "evaluated": [
                {
                    "round": e.round,
                    "provenance": e.provenance,
                    "score": e.score,
                    "genome": json.loads(genome_to_json(e.genome)),
                }
                for e in self.evaluated
            ],
            "training_logs": self.training_logs,
        }

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "provenance", "score"])
            for e in self.evaluated:
                writer.writerow([e.round, e.provenance, repr(e.score)])


def select_starts(history: ObservationHistory, phase: str, k: int) -> list[Genome]:
    """Starting points for ascent. ``phase="source"``: the top ceil(k/n)
    records per source task by score, interleaved best-first across tasks
    and truncated to k. ``phase="target"``: the top k target records.
    Ties keep insertion order."""
    if phase not in ("source", "target"):
        raise ValueError(f"phase must be source or target, got {phase!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if phase == "target":
        if history.target is None:
            raise SearchError("history has no designated target task")
        records = history.records(history.target)
        if not records:
            raise SearchError("no target records to start from")
        ranked = sorted(records, key=lambda r: -r.score)
        return [r.genome for r in ranked[:k]]

    tasks = history.source_tasks()
    per_task = [history.records(t) for t in tasks]
    per_task = [recs for recs in per_task if recs]
    if not per_task:
        raise SearchError("no source records to start from")
    quota = -(-k // len(per_task))  # ceil
    columns = [sorted(recs, key=lambda r: -r.score)[:quota] for recs in per_task]
    merged: list[Genome] = []
    for rank in range(quota):
        for col in columns:
            if rank < len(col):
                merged.append(col[rank].genome)
    return merged[:k]


def latent_ascend(
    code: ArchitectureCode,
    net: XferNet,
    eta: float,
    max_steps: int,
    known: set,
) -> Optional[Genome]:
    """Gradient ascent on the target-task prediction in code space; after
    each step the shifted code is decoded greedily and the first genome not
    in ``known`` is returned. Returns None when no novel genome appears
    within ``max_steps``."""
    result = _ascend_trace(code, net, eta, max_steps, known)
    return None if result is None else result[0]


def _ascend_trace(
    code: ArchitectureCode,
    net: XferNet,
    eta: float,
    max_steps: int,
    known: set,
) -> Optional[tuple[Genome, float, float]]:
    """Like :func:`latent_ascend` but also returns the predicted target
    score at the start code and at the accepted code."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    z = np.array(code.z, dtype=float)
    states = code.states
    if states is None:
        states = np.tile(z, (net.seq_len, 1))
    states = np.array(states, dtype=float)
    start_pred, _ = net.code_gradient(ArchitectureCode(z.copy()), net.target)
    for _ in range(max_steps):
        pred, grad = net.code_gradient(ArchitectureCode(z.copy()), net.target)
        z = z + eta * grad
        states = states + eta * grad[None, :]
        tokens = net.decode(states)[1]
        genome = detokenize(tokens)
        if fingerprint(genome) not in known:
            accept_pred, _ = net.code_gradient(ArchitectureCode(z.copy()), net.target)
            return genome, start_pred, accept_pred
    return None


def _random_novel(rng: random.Random, num_blocks: int, known: set) -> Genome:
    while True:
        genome = sample_genome(rng.randrange(2**63), num_blocks)
        if fingerprint(genome) not in known:
            return genome


def xfernas_search(
    oracle: Callable[[Genome], float],
    source_history: ObservationHistory,
    cfg: SearchConfig,
    target_task: str,
    train_cfg: Optional[TrainConfig] = None,
    num_blocks: int = 5,
) -> SearchReport:
    """Run the budgeted two-phase search against a target-task evaluator.

    ``source_history`` may be empty, in which case round 1 falls back to
    random proposals (the no-transfer arm). The surrogate is retrained from
    scratch between rounds on everything observed so far. Oracle failures
    raise :class:`SearchError` carrying the partial report.
    """
    base_train = train_cfg or TrainConfig()
    report = SearchReport(config=cfg)
    source_tasks = [t for t in source_history.registry if t != target_task]
    tasks = source_tasks + [target_task]

    history = source_history.copy()
    history.target = target_task
    history.register_task(target_task)
    known = history.fingerprints()

    rng = random.Random(cfg.seed)
    evaluations = 0

    def evaluate(genome: Genome, round_idx: int, provenance: str) -> None:
        nonlocal evaluations
        if evaluations >= cfg.budget:
            raise SearchError("evaluation budget exceeded", report)
        try:
            score = oracle(genome)
        except Exception as exc:
            report.aborted = f"oracle failure: {exc}"
            raise SearchError(report.aborted, report) from exc
        evaluations += 1
        report.evaluated.append(EvaluatedCandidate(genome, score, round_idx, provenance))
        history.append(ObservationRecord(target_task, genome, score))

    for round_idx in range(1, cfg.rounds + 1):
        remaining = cfg.budget - evaluations
        if remaining <= 0:
            break
        n_prop = min(cfg.starts_per_round, remaining)

        phase = "source" if round_idx == 1 else "target"
        trainable = len(history) > 0
        net = None
        if trainable:
            net = XferNet(
                tasks, target_task, num_blocks=num_blocks, seed=cfg.seed * 7919 + round_idx
            )
            round_cfg = TrainConfig(
                alpha=base_train.alpha,
                lr=base_train.lr,
                weight_decay=base_train.weight_decay,
                epochs=base_train.epochs,
                batch_size=base_train.batch_size,
                seed=base_train.seed * 7919 + round_idx,
            )
            report.training_logs.append(net.train(history, round_cfg))

        proposals: list[tuple[Genome, str]] = []
        if net is not None:
            provenance = f"{phase}-start"
            try:
                partition = (
                    sum(len(history.records(t)) for t in source_tasks)
                    if phase == "source"
                    else len(history.records(target_task))
                )
                starts = select_starts(history, phase, max(partition, 1)) if partition else []
            except SearchError:
                starts = []
            round_known = set(known)
            for start in starts:
                if len(proposals) >= n_prop:
                    break
                _, code = net.encode(tokenize(start))
                genome = latent_ascend(code, net, cfg.eta, cfg.max_ascent_steps, round_known)
                if genome is not None:
                    round_known.add(fingerprint(genome))
                    proposals.append((genome, provenance))
        while len(proposals) < n_prop:
            round_known = known | {fingerprint(g) for g, _ in proposals}
            genome = _random_novel(rng, num_blocks, round_known)
            proposals.append((genome, "random"))

        for genome, provenance in proposals:
            evaluate(genome, round_idx, provenance)
            known.add(fingerprint(genome))

    return report
