"""Experiment harness: the source/target knowledge ablation grid and the
search comparison (transfer vs. no-transfer vs. random sampling).

Every grid cell and comparison run is a pure function of its configuration,
so cells can run in a process pool; numerics inside each unit are pinned to
one BLAS thread (see :mod:`xfernas.xfernet`), which makes outputs identical
regardless of worker count. Results are ordered canonically before they are
written, so reruns produce byte-identical CSV files.
"""

from __future__ import annotations

import csv
import json
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Iterable, Optional, Sequence

import numpy as np

from .archspace import Genome, fingerprint, sample_genome, tokenize
from .search import SearchConfig, xfernas_search
from .taskbench import (
    ObservationHistory,
    ObservationRecord,
    TaskSuite,
    build_source_knowledge,
    oracle_eval,
    pearson,
)
from .xfernet import TrainConfig, XferNet

__all__ = [
    "AblationConfig",
    "AblationCell",
    "run_ablation",
    "summarize_cells",
    "write_grid_csv",
    "write_summary_csv",
    "ComparisonRow",
    "ComparisonResult",
    "run_search_comparison",
    "write_comparison_csv",
]

DEFAULT_SUITE = {"seed": 42, "n_tasks": 5, "tau": 0.3, "noise_sigma": 0.01}

# Epochs used inside the ablation grid and the search comparison. Full-length
# training (TrainConfig default, 200 epochs) is unaffordable for 240 grid
# trainings on a small CPU budget; held-out correlation saturates much
# earlier, so grid cells train a fixed shorter schedule.
GRID_EPOCHS = 15
SEARCH_EPOCHS = 30


def _grid_train_defaults() -> TrainConfig:
    return TrainConfig(epochs=GRID_EPOCHS)


@dataclass
class AblationConfig:
    pool_size: int = 600
    holdout: int = 50
    splits: int = 10
    source_sizes: tuple[int, ...] = (0, 50, 100, 150)
    target_sizes: tuple[int, ...] = (0, 10, 25, 50, 100, 150)
    suite: dict = field(default_factory=lambda: dict(DEFAULT_SUITE))
    train: TrainConfig = field(default_factory=_grid_train_defaults)
    seed: int = 0
    num_blocks: int = 5
    workers: Optional[int] = None

    def __post_init__(self) -> None:
        if self.holdout >= self.pool_size:
            raise ValueError("holdout must be smaller than pool_size")
        if max(self.target_sizes) > self.pool_size - self.holdout:
            raise ValueError("target sizes exceed the candidate pool")
        if self.splits < 1:
            raise ValueError("splits must be >= 1")

    @classmethod
    def from_dict(cls, payload: dict) -> "AblationConfig":
        kwargs = dict(payload)
        if "source_sizes" in kwargs:
            kwargs["source_sizes"] = tuple(kwargs["source_sizes"])
        if "target_sizes" in kwargs:
            kwargs["target_sizes"] = tuple(kwargs["target_sizes"])
        if "train" in kwargs and isinstance(kwargs["train"], dict):
            kwargs["train"] = TrainConfig(**kwargs["train"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["source_sizes"] = list(self.source_sizes)
        out["target_sizes"] = list(self.target_sizes)
        return out


@dataclass(frozen=True)
class AblationCell:
    source_size: int
    target_size: int
    split: int
    pearson_r: float


def _cell_seed(base: int, *key: int) -> int:
    return int(np.random.SeedSequence((base,) + key).generate_state(1)[0])


def _target_pool(cfg: AblationConfig, suite: TaskSuite):
    """The pool of evaluated target-task genomes: first ``holdout`` entries
    are held out, the rest are target-knowledge candidates."""
    rng = random.Random(_cell_seed(cfg.seed, 1))
    genomes: list[Genome] = []
    seen: set[str] = set()
    while len(genomes) < cfg.pool_size:
        genome = sample_genome(rng.randrange(2**63), cfg.num_blocks)
        fp = fingerprint(genome)
        if fp in seen:
            continue
        seen.add(fp)
        genomes.append(genome)
    scores = np.array([oracle_eval(suite, suite.target_task, g) for g in genomes])
    return genomes, scores


def _split_history(
    cfg: AblationConfig,
    suite: TaskSuite,
    candidates: Sequence[Genome],
    cand_scores: np.ndarray,
    source_full: ObservationHistory,
    source_size: int,
    target_size: int,
    split: int,
) -> ObservationHistory:
    """Observation history for one grid cell. ``source_full`` is the split's
    source knowledge at the maximum size; smaller sizes truncate it, so cells
    of one split are nested. Target records are a split-seeded draw from the
    candidate pool."""
    history = ObservationHistory(target=suite.target_task)
    for task in suite.source_tasks:
        history.register_task(task)
        if source_size > 0:
            for record in source_full.records(task)[:source_size]:
                history.append(record)
    if target_size > 0:
        order = np.random.default_rng(_cell_seed(cfg.seed, 3, split)).permutation(len(candidates))
        for idx in order[:target_size]:
            history.append(
                ObservationRecord(suite.target_task, candidates[idx], float(cand_scores[idx]))
            )
    return history


# worker-side cache: the target pool is identical for every cell
_WORKER_STATE: dict = {}


def _worker_cell(payload: tuple) -> AblationCell:
    cfg_dict, source_size, target_size, split = payload
    cfg = AblationConfig.from_dict(cfg_dict)
    key = json.dumps(cfg_dict, sort_keys=True)
    if _WORKER_STATE.get("key") != key:
        suite = TaskSuite.from_descriptor(cfg.suite)
        genomes, scores = _target_pool(cfg, suite)
        _WORKER_STATE.clear()
        _WORKER_STATE.update(
            {
                "key": key,
                "suite": suite,
                "genomes": genomes,
                "scores": scores,
                "holdout_toks": np.asarray(
                    [tokenize(g) for g in genomes[: cfg.holdout]], dtype=np.int64
                ),
                "sources": {},
            }
        )
    suite = _WORKER_STATE["suite"]
    genomes = _WORKER_STATE["genomes"]
    scores = _WORKER_STATE["scores"]
    holdout_toks = _WORKER_STATE["holdout_toks"]
    sources = _WORKER_STATE["sources"]
    if split not in sources:
        sources[split] = build_source_knowledge(
            suite,
            max(cfg.source_sizes),
            seed=_cell_seed(cfg.seed, 2, split),
            num_blocks=cfg.num_blocks,
        )
    history = _split_history(
        cfg,
        suite,
        genomes[cfg.holdout :],
        scores[cfg.holdout :],
        sources[split],
        source_size,
        target_size,
        split,
    )
    net = XferNet(
        suite.task_ids,
        suite.target_task,
        num_blocks=cfg.num_blocks,
        seed=_cell_seed(cfg.seed, 4, source_size, target_size, split),
    )
    if len(history) > 0:
        cell_train = TrainConfig(
            alpha=cfg.train.alpha,
            lr=cfg.train.lr,
            weight_decay=cfg.train.weight_decay,
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            seed=_cell_seed(cfg.seed, 5, source_size, target_size, split),
        )
        net.train(history, cell_train)
    preds = net.predict_batch(holdout_toks, suite.target_task)
    return AblationCell(
        source_size, target_size, split, pearson(preds, scores[: cfg.holdout])
    )


def run_ablation(cfg: AblationConfig) -> list[AblationCell]:
    """All (source_size, target_size, split) cells, canonically ordered."""
    keys = [
        (src, tgt, split)
        for src in cfg.source_sizes
        for tgt in cfg.target_sizes
        for split in range(cfg.splits)
    ]
    workers = cfg.workers if cfg.workers is not None else 2
    payloads = [(cfg.to_dict(), *key) for key in keys]
    if workers <= 1:
        cells = [_worker_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_worker_cell, payloads, chunksize=1))
    return sorted(cells, key=lambda c: (c.source_size, c.target_size, c.split))


def summarize_cells(cells: Iterable[AblationCell]) -> dict[tuple[int, int], tuple[float, float]]:
    """Mean and (sample) stddev of pearson_r per (source_size, target_size)."""
    grouped: dict[tuple[int, int], list[float]] = {}
    for cell in cells:
        grouped.setdefault((cell.source_size, cell.target_size), []).append(cell.pearson_r)
    out = {}
    for key in sorted(grouped):
        vals = grouped[key]
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out[key] = (statistics.fmean(vals), std)
    return out


def write_grid_csv(cells: Sequence[AblationCell], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_size", "target_size", "split", "pearson_r"])
        for cell in cells:
            writer.writerow([cell.source_size, cell.target_size, cell.split, repr(cell.pearson_r)])


def write_summary_csv(cells: Sequence[AblationCell], path: str) -> None:
    summary = summarize_cells(cells)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_size", "target_size", "mean", "std"])
        for (src, tgt), (mean_r, std_r) in summary.items():
            writer.writerow([src, tgt, repr(mean_r), repr(std_r)])


# ---------------------------------------------------------------------------
# search comparison


@dataclass(frozen=True)
class ComparisonRow:
    seed: int
    arm: str  # "transfer" | "no_transfer" | "random"
    best_score: float
    oracle_calls: int


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    medians: dict[str, float]
    transfer_vs_random_wins: int
    transfer_vs_no_transfer_wins: int
    n_seeds: int


class _CountingOracle:
    def __init__(self, suite: TaskSuite):
        self.suite = suite
        self.calls = 0

    def __call__(self, genome: Genome) -> float:
        self.calls += 1
        return oracle_eval(self.suite, self.suite.target_task, genome)


def _random_arm(suite: TaskSuite, budget: int, seed: int, num_blocks: int) -> tuple[float, int]:
    oracle = _CountingOracle(suite)
    rng = random.Random(seed)
    seen: set[str] = set()
    best = -1.0
    while len(seen) < budget:
        genome = sample_genome(rng.randrange(2**63), num_blocks)
        fp = fingerprint(genome)
        if fp in seen:
            continue
        seen.add(fp)
        best = max(best, oracle(genome))
    return best, oracle.calls


def _comparison_job(payload: tuple) -> ComparisonRow:
    suite_desc, seed, arm, budget, train_dict, source_per_task, num_blocks = payload
    suite = TaskSuite.from_descriptor(suite_desc)
    if arm == "random":
        best, calls = _random_arm(suite, budget, _cell_seed(seed, 11), num_blocks)
        return ComparisonRow(seed, arm, best, calls)
    train_cfg = TrainConfig(**train_dict)
    oracle = _CountingOracle(suite)
    if arm == "transfer":
        source = build_source_knowledge(
            suite, source_per_task, seed=_cell_seed(suite.seed, 777), num_blocks=num_blocks
        )
    else:
        source = ObservationHistory()
    report = xfernas_search(
        oracle,
        source,
        SearchConfig(budget=budget, seed=seed),
        target_task=suite.target_task,
        train_cfg=train_cfg,
        num_blocks=num_blocks,
    )
    return ComparisonRow(seed, arm, report.best.score, oracle.calls)


def run_search_comparison(
    suite: TaskSuite,
    seeds: Sequence[int],
    budget: int = 33,
    train_cfg: Optional[TrainConfig] = None,
    source_per_task: int = 200,
    num_blocks: int = 5,
    workers: Optional[int] = None,
) -> ComparisonResult:
    """Per seed, run the with-transfer search, the no-transfer search, and a
    random-sampling baseline with the same budget; report best scores,
    medians, and per-seed win counts."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds to compare")
    train = train_cfg or TrainConfig(epochs=SEARCH_EPOCHS)
    train_dict = asdict(train)
    jobs = [
        (suite.descriptor(), seed, arm, budget, train_dict, source_per_task, num_blocks)
        for seed in seeds
        for arm in ("transfer", "no_transfer", "random")
    ]
    n_workers = workers if workers is not None else 2
    if n_workers <= 1:
        rows = [_comparison_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_comparison_job, jobs, chunksize=1))
    rows.sort(key=lambda r: (r.seed, r.arm))
    by_arm: dict[str, dict[int, float]] = {"transfer": {}, "no_transfer": {}, "random": {}}
    for row in rows:
        by_arm[row.arm][row.seed] = row.best_score
    medians = {arm: float(np.median(list(scores.values()))) for arm, scores in by_arm.items()}
    tvr = sum(1 for s in seeds if by_arm["transfer"][s] >= by_arm["random"][s])
    tvn = sum(1 for s in seeds if by_arm["transfer"][s] >= by_arm["no_transfer"][s])
    return ComparisonResult(rows, medians, tvr, tvn, len(seeds))


def write_comparison_csv(result: ComparisonResult, path: str, summary_path: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "arm", "best_score", "oracle_calls"])
        for row in result.rows:
            writer.writerow([row.seed, row.arm, repr(row.best_score), row.oracle_calls])
    if summary_path is not None:
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for arm in sorted(result.medians):
                writer.writerow([f"median_best_{arm}", repr(result.medians[arm])])
            writer.writerow(["transfer_vs_random_wins", result.transfer_vs_random_wins])
            writer.writerow(["transfer_vs_no_transfer_wins", result.transfer_vs_no_transfer_wins])
            writer.writerow(["n_seeds", result.n_seeds])
