"""Command-line interface. One binary with subcommands covering genome
sampling, suite/knowledge construction, surrogate training, search, the
ablation grid, and the search comparison. All outputs are deterministic
given the flags; errors exit nonzero with a single-line diagnostic."""

from __future__ import annotations

import argparse
import json
import sys

from . import archspace, experiments, taskbench
from .search import SearchConfig, xfernas_search
from .taskbench import ObservationHistory, TaskSuite, build_source_knowledge, load_history
from .xfernet import TrainConfig, XferNet


def _parse_seeds(text: str) -> list[int]:
    """Accept "0..9" ranges or comma-separated integers."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def _cmd_sample(args) -> None:
    genome = archspace.sample_genome(args.seed, args.b)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(archspace.genome_to_json(genome) + "\n")
    print(f"wrote genome (B={args.b}, seed={args.seed}) to {args.out}")


def _cmd_suite_init(args) -> None:
    suite = TaskSuite(seed=args.seed, n_tasks=args.tasks, tau=args.tau, noise_sigma=args.noise_sigma)
    suite.save(args.out)
    print(f"wrote suite descriptor ({args.tasks} tasks, target {suite.target_task}) to {args.out}")


def _cmd_knowledge_build(args) -> None:
    suite = TaskSuite.load(args.suite)
    history = build_source_knowledge(suite, args.per_task, seed=args.seed, num_blocks=args.b)
    taskbench.save_history(history, args.out)
    print(f"wrote {len(history)} records ({args.per_task} per source task) to {args.out}")


def _cmd_train(args) -> None:
    history = load_history(args.history, target=args.target)
    tasks = history.registry
    target = args.target if args.target is not None else tasks[-1]
    if target not in tasks:
        tasks = tasks + [target]
    cfg = TrainConfig(
        alpha=args.alpha,
        lr=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    net = XferNet(tasks, target, seed=args.seed)
    log = net.train(history, cfg)
    net.save(args.out)
    print(
        f"trained on {len(history)} records for {cfg.epochs} epochs; "
        f"loss {log[0]:.4f} -> {log[-1]:.4f}; checkpoint at {args.out}.params.json"
    )


def _cmd_search(args) -> None:
    suite = TaskSuite.load(args.suite)
    if args.no_transfer or args.source is None:
        source = ObservationHistory()
    else:
        source = load_history(args.source)
    oracle = experiments._CountingOracle(suite)
    cfg = SearchConfig(budget=args.budget, eta=args.eta, max_ascent_steps=args.steps, seed=args.seed)
    train_cfg = TrainConfig(epochs=args.epochs)
    report = xfernas_search(
        oracle, source, cfg, target_task=suite.target_task, train_cfg=train_cfg
    )
    report.save_json(args.out)
    csv_out = args.out[: -len(".json")] + ".csv" if args.out.endswith(".json") else args.out + ".csv"
    report.save_csv(csv_out)
    print(
        f"evaluated {len(report.evaluated)} architectures ({oracle.calls} oracle calls); "
        f"best score {report.best.score:.4f}; report at {args.out}"
    )


def _cmd_ablation(args) -> None:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = experiments.AblationConfig.from_dict(json.load(fh))
    cells = experiments.run_ablation(cfg)
    experiments.write_grid_csv(cells, args.out)
    base = args.out[: -len(".csv")] if args.out.endswith(".csv") else args.out
    experiments.write_summary_csv(cells, base + "_summary.csv")
    with open(base + "_meta.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(cells)} cells to {args.out} (+ summary, meta)")


def _cmd_compare(args) -> None:
    suite = TaskSuite.load(args.suite)
    seeds = _parse_seeds(args.seeds)
    result = experiments.run_search_comparison(
        suite,
        seeds,
        budget=args.budget,
        train_cfg=TrainConfig(epochs=args.epochs),
        workers=args.workers,
    )
    base = args.out[: -len(".csv")] if args.out.endswith(".csv") else args.out
    experiments.write_comparison_csv(result, args.out, base + "_summary.csv")
    print(
        f"medians: transfer {result.medians['transfer']:.4f}, "
        f"no_transfer {result.medians['no_transfer']:.4f}, "
        f"random {result.medians['random']:.4f}; "
        f"transfer wins {result.transfer_vs_random_wins}/{result.n_seeds} vs random, "
        f"{result.transfer_vs_no_transfer_wins}/{result.n_seeds} vs no-transfer"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xfernas")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="emit a random genome in dag JSON format")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    suite = sub.add_parser("suite", help="task suite operations")
    suite_sub = suite.add_subparsers(dest="suite_command", required=True)
    p = suite_sub.add_parser("init", help="create a suite descriptor")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_suite_init)

    knowledge = sub.add_parser("knowledge", help="observation history operations")
    knowledge_sub = knowledge.add_subparsers(dest="knowledge_command", required=True)
    p = knowledge_sub.add_parser("build", help="evaluate random genomes per source task")
    p.add_argument("--suite", required=True)
    p.add_argument("--per-task", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--b", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_knowledge_build)

    p = sub.add_parser("train", help="train the surrogate on a history file")
    p.add_argument("--history", required=True)
    p.add_argument("--target", default=None, help="target task id to add to the registry")
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("search", help="run the budgeted two-phase search")
    p.add_argument("--suite", required=True)
    p.add_argument("--source", default=None, help="source knowledge JSONL")
    p.add_argument("--no-transfer", action="store_true", help="ignore source knowledge")
    p.add_argument("--budget", type=int, default=33)
    p.add_argument("--eta", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--epochs", type=int, default=experiments.SEARCH_EPOCHS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("ablation", help="run the knowledge-transfer ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablation)

    p = sub.add_parser("compare", help="compare transfer / no-transfer / random arms")
    p.add_argument("--suite", required=True)
    p.add_argument("--seeds", default="0..9")
    p.add_argument("--budget", type=int, default=33)
    p.add_argument("--epochs", type=int, default=experiments.SEARCH_EPOCHS)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
