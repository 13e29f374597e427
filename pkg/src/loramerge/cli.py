"""Command-line interface.

Subcommands: ``merge`` applies an optional pruning mask and writes the merged
delta, ``search`` runs the evolutionary mask search, ``inspect`` runs the
diagnostic baselines (leave-one-out, greedy, random), ``eval`` scores an
existing merged delta, and ``make-testbed`` builds a synthetic benchmark.

Exit codes are a stable contract: 0 success, 1 internal error (evaluator or
aborted search), 2 user or configuration error.  Given identical inputs and
seeds, every command rewrites identical bytes, with two documented
exceptions: timing.csv (wall-clock) and rendered figures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .adapters import build_grid, load_adapter, save_delta
from .config import RunConfig, load_config
from .errors import (
    AdapterSchemaError,
    CheckpointError,
    ConfigError,
    EvaluatorError,
    GridStructureError,
    MaskFormatError,
    SearchAbortedError,
    ShapeMismatchError,
    TensorFileError,
    UnsupportedMethodError,
)
from .fitness import (
    BuiltinEvaluator,
    ExpertScores,
    ExternalEvaluator,
    fitness,
    normalized_accuracy,
)
from .masks import PruningMask, mask_from_json, mask_to_json
from .merge import merge_with_mask
from .reports import (
    render_impact_figure,
    render_random_figure,
    render_trace_figure,
    write_eval_csv,
    write_impact_csv,
    write_random_csv,
    write_timing_csv,
    write_trace_csv,
)
from .search import greedy_prune, leave_one_out, random_report, run_search
from .testbed import TestbedSpec, export_testbed, load_testbed, make_testbed

_USER_ERRORS = (
    ConfigError,
    TensorFileError,
    AdapterSchemaError,
    ShapeMismatchError,
    GridStructureError,
    MaskFormatError,
    UnsupportedMethodError,
    CheckpointError,
)


def _load_grid(config: RunConfig):
    checkpoints = []
    for entry in config.adapters:
        ckpt = load_adapter(entry.path, entry.naming)
        if ckpt.task != entry.task:
            # The config names the task; file metadata is only a default.
            ckpt = dataclasses.replace(ckpt, task=entry.task)
        checkpoints.append(ckpt)
    return build_grid(checkpoints)


def _make_evaluator(config: RunConfig):
    if config.evaluator.type == "builtin":
        bed = load_testbed(config.evaluator.testbed)
        return BuiltinEvaluator(bed, subsample=config.search.subsample)
    return ExternalEvaluator(
        list(config.evaluator.command),
        tasks=[entry.task for entry in config.adapters],
        timeout=config.evaluator.timeout,
        subsample=config.search.subsample,
        workers=config.search.parallelism,
    )


def _resolve_experts(config: RunConfig, evaluator, *, required: bool) -> ExpertScores | None:
    """Expert scores come from the config when every adapter carries one,
    otherwise from the builtin testbed's measured accuracies.  An external
    evaluator cannot measure them, so there they are mandatory for any
    command that normalizes."""
    supplied = {entry.task: entry.expert_accuracy for entry in config.adapters}
    if all(value is not None for value in supplied.values()):
        return ExpertScores({task: float(v) for task, v in supplied.items()}, source="supplied")
    if isinstance(evaluator, BuiltinEvaluator):
        return evaluator.expert_scores
    missing = sorted(task for task, value in supplied.items() if value is None)
    if required:
        raise ConfigError(
            "an external evaluator cannot measure expert accuracy; add "
            f"expert_accuracy to adapters: {', '.join(missing)}"
        )
    print(
        f"warning: no expert accuracy for {', '.join(missing)}; "
        "reporting absolute accuracy only",
        file=sys.stderr,
    )
    return None


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _merge_echo(config: RunConfig) -> dict:
    params = config.merge
    return {
        "method": params.method,
        "lambda": params.lam,
        "density": params.density,
        "drop_rate": params.drop_rate,
        "inner": params.inner,
        "order": params.order,
        "rank": params.rank,
        "seed": params.seed,
    }


def cmd_merge(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    grid = _load_grid(config)
    if args.mask is not None:
        mask = mask_from_json(Path(args.mask).read_text())
    else:
        mask = PruningMask.zeros(num_layers=grid.num_layers, tasks=list(grid.tasks))
    merged = merge_with_mask(grid, mask, config.merge)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    save_delta(out / "merged.safetensors", merged.entries, merged.manifest())
    _write_json(out / "merge.json", merged.manifest())
    print(
        f"merged {grid.num_tasks} adapters with method={config.merge.method} "
        f"({mask.popcount} units pruned) -> {out / 'merged.safetensors'}"
    )
    return 0


def _apply_search_flags(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for flag, field in (
        ("pop", "pop_size"),
        ("gens", "generations"),
        ("sigma", "sigma0"),
        ("max_prune", "max_prune"),
        ("seed", "seed"),
        ("parallel", "parallelism"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if not overrides:
        return config
    try:
        search = dataclasses.replace(config.search, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return dataclasses.replace(config, search=search)


def cmd_search(args: argparse.Namespace) -> int:
    config = _apply_search_flags(load_config(args.config), args)
    search = config.search
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    grid = _load_grid(config)
    evaluator = _make_evaluator(config)
    try:
        experts = _resolve_experts(config, evaluator, required=True)
        print(
            f"pop={search.pop_size} gens={search.generations} "
            f"sigma={search.sigma0:g} k={search.max_prune:g} "
            f"seed={search.seed} parallel={search.parallelism}"
        )
        if args.resume is not None:
            given = Path(args.resume)
            checkpoint_dir = given.parent if given.is_file() else given
            resume = True
        else:
            checkpoint_dir = out
            resume = False

        def progress(row) -> None:
            print(
                f"gen {row.generation}: best={row.best_val_fitness:.6f} "
                f"ever={row.best_ever_fitness:.6f} pruned={row.popcount}"
            )

        result = run_search(
            grid,
            evaluator,
            experts,
            search,
            config.merge,
            checkpoint_dir=checkpoint_dir,
            resume=resume,
            progress=progress,
        )
    finally:
        evaluator.close()

    write_trace_csv(out / "trace.csv", result.trace)
    write_timing_csv(out / "timing.csv", result.seconds)
    (out / "best_mask.json").write_text(mask_to_json(result.best_mask) + "\n")
    merged = merge_with_mask(grid, result.best_mask, config.merge)
    save_delta(out / "merged.safetensors", merged.entries, merged.manifest())
    _write_json(
        out / "run.json",
        {
            "command": "search",
            "search": {
                "pop_size": search.pop_size,
                "generations": search.generations,
                "sigma0": search.sigma0,
                "max_prune": search.max_prune,
                "seed": search.seed,
                "parallelism": search.parallelism,
                "subsample": search.subsample,
            },
            "merge": _merge_echo(config),
            "tasks": list(grid.tasks),
            "num_layers": grid.num_layers,
            "baseline_fitness": result.baseline_fitness,
            "best_fitness": result.best_fitness,
            "found_at_generation": result.found_at,
            "pruned_units": result.best_mask.popcount,
        },
    )
    if config.figures:
        render_trace_figure(out / "trace.png", result.trace)
    print(
        f"baseline {result.baseline_fitness:.6f} -> best {result.best_fitness:.6f} "
        f"(generation {result.found_at}, {result.best_mask.popcount} units pruned)"
    )
    print(f"outputs in {out}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    grid = _load_grid(config)
    evaluator = _make_evaluator(config)
    try:
        experts = _resolve_experts(config, evaluator, required=True)
        if args.mode == "leave-one-out":
            loo = leave_one_out(grid, evaluator, experts, config.merge)
            write_impact_csv(out / "impact.csv", loo)
            if config.figures:
                render_impact_figure(out / "impact.png", loo)
            harmful = [
                (float(loo.impacts[layer, task]), layer, task)
                for layer in range(grid.num_layers)
                for task in range(grid.num_tasks)
                if loo.impacts[layer, task] > 0.0
            ]
            print(f"baseline {loo.baseline:.6f}; {len(harmful)} units improve fitness when removed")
            for impact, layer, task in sorted(harmful, reverse=True):
                print(f"  layer {layer}, {grid.tasks[task]}: +{impact:.6f}")
        elif args.mode == "greedy":
            result = greedy_prune(grid, evaluator, experts, config.merge)
            write_impact_csv(out / "impact.csv", result.loo)
            (out / "greedy_mask.json").write_text(mask_to_json(result.mask) + "\n")
            improves = result.fitness > result.loo.baseline
            _write_json(
                out / "greedy.json",
                {
                    "baseline_fitness": result.loo.baseline,
                    "fitness": result.fitness,
                    "pruned_units": result.mask.popcount,
                    "improves_over_baseline": improves,
                },
            )
            print(
                f"greedy pruned {result.mask.popcount} units: "
                f"baseline {result.loo.baseline:.6f} -> {result.fitness:.6f}"
            )
            if not improves:
                print(
                    "warning: greedy pruning fell below the unpruned baseline; "
                    "individually harmful units are not jointly harmful here",
                    file=sys.stderr,
                )
        else:
            sparsity = args.sparsity if args.sparsity is not None else config.search.max_prune
            seed = args.seed if args.seed is not None else config.search.seed
            try:
                report = random_report(
                    grid,
                    evaluator,
                    experts,
                    sparsity=sparsity,
                    trials=args.trials,
                    seed=seed,
                    params=config.merge,
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            write_random_csv(out / "random.csv", report)
            _write_json(
                out / "random.json",
                {
                    "sparsity": report.sparsity,
                    "trials": args.trials,
                    "seed": seed,
                    "baseline_fitness": report.baseline,
                    "mean_fitness": report.mean,
                    "std_fitness": report.std,
                },
            )
            if config.figures:
                render_random_figure(out / "random.png", report)
            print(
                f"random pruning at sparsity {sparsity:g}, {args.trials} trials: "
                f"mean {report.mean:.6f} std {report.std:.6f} "
                f"(baseline {report.baseline:.6f})"
            )
    finally:
        evaluator.close()
    print(f"outputs in {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    evaluator = _make_evaluator(config)
    try:
        experts = _resolve_experts(config, evaluator, required=False)
        accuracies = evaluator.evaluate_file(args.delta)
    finally:
        evaluator.close()
    write_eval_csv(out / "eval.csv", accuracies, experts)
    if experts is None:
        print(f"{'task':<16}{'accuracy':>10}")
        for task in sorted(accuracies):
            print(f"{task:<16}{accuracies[task]:>10.6f}")
        mean = sum(accuracies.values()) / len(accuracies)
        print(f"mean accuracy: {mean:.6f}")
    else:
        print(f"{'task':<16}{'accuracy':>10}{'normalized':>12}")
        for task in sorted(accuracies):
            norm = normalized_accuracy(accuracies[task], experts.scores[task])
            print(f"{task:<16}{accuracies[task]:>10.6f}{norm:>12.6f}")
        print(f"mean normalized accuracy: {fitness(accuracies, experts):.6f}")
    return 0


def cmd_make_testbed(args: argparse.Namespace) -> int:
    spec = TestbedSpec(
        num_layers=args.layers,
        num_tasks=args.tasks,
        dims=args.dims,
        num_negatives=args.negatives,
        seed=args.seed,
        coupled_pair=args.coupled,
        samples_per_task=args.samples,
    )
    bed = make_testbed(spec)
    out = Path(args.out)
    json_path = export_testbed(bed, out)
    task_names = [task.name for task in bed.tasks]
    _write_json(
        out / "config.json",
        {
            "adapters": [
                {"task": name, "path": f"adapters/{name}.safetensors"} for name in task_names
            ],
            "merge": {"method": "ta", "lambda": 1.0},
            "evaluator": {"type": "builtin", "testbed": "testbed.json"},
            "output_dir": "runs",
        },
    )
    print(f"testbed: {spec.num_tasks} tasks x {spec.num_layers} layers -> {json_path}")
    if bed.negative_units:
        cells = ", ".join(
            f"(layer {layer}, {task_names[task]})" for layer, task in bed.negative_units
        )
        print(f"planted negative units: {cells}")
    if bed.coupled_pair:
        cells = ", ".join(
            f"(layer {layer}, {task_names[task]})" for layer, task in bed.coupled_pair
        )
        print(f"coupled pair: {cells}")
    scores = " ".join(f"{name}={bed.expert_scores[name]:.4f}" for name in task_names)
    print(f"expert accuracy: {scores}")
    print(f"starter config: {out / 'config.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loramerge",
        description="Merge LoRA adapters and search for negative modules to prune.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    merge = sub.add_parser("merge", help="merge adapters, optionally applying a pruning mask")
    merge.add_argument("config", help="run configuration JSON")
    merge.add_argument("--mask", help="pruning mask JSON file (default: prune nothing)")
    merge.set_defaults(func=cmd_merge)

    search = sub.add_parser("search", help="search for the pruning mask maximizing fitness")
    search.add_argument("config", help="run configuration JSON")
    search.add_argument("--pop", type=int, help="population size per generation")
    search.add_argument("--gens", type=int, help="number of generations")
    search.add_argument("--sigma", type=float, help="initial step size")
    search.add_argument("--max-prune", type=float, dest="max_prune", help="pruning budget in [0, 1)")
    search.add_argument("--seed", type=int, help="search seed")
    search.add_argument("--parallel", type=int, help="concurrent evaluations")
    search.add_argument(
        "--resume",
        metavar="CHECKPOINT",
        help="checkpoint.json (or its directory) from an interrupted run",
    )
    search.set_defaults(func=cmd_search)

    inspect = sub.add_parser("inspect", help="diagnostic pruning baselines")
    inspect.add_argument("config", help="run configuration JSON")
    inspect.add_argument(
        "--mode",
        required=True,
        choices=("leave-one-out", "greedy", "random"),
        help="which diagnostic to run",
    )
    inspect.add_argument(
        "--sparsity",
        type=float,
        help="fraction of units each random mask prunes (default: search.max_prune)",
    )
    inspect.add_argument("--trials", type=int, default=3, help="random masks to draw")
    inspect.add_argument("--seed", type=int, help="random-mode seed (default: search.seed)")
    inspect.set_defaults(func=cmd_inspect)

    evaluate = sub.add_parser("eval", help="score an existing merged delta")
    evaluate.add_argument("config", help="run configuration JSON")
    evaluate.add_argument("--delta", required=True, help="merged delta safetensors file")
    evaluate.set_defaults(func=cmd_eval)

    testbed = sub.add_parser("make-testbed", help="build a synthetic benchmark with known structure")
    testbed.add_argument("--out", required=True, help="output directory")
    testbed.add_argument("--layers", type=int, default=3)
    testbed.add_argument("--tasks", type=int, default=3)
    testbed.add_argument("--dims", type=int, default=16)
    testbed.add_argument("--negatives", type=int, default=0, help="negative units to plant")
    testbed.add_argument("--seed", type=int, default=0)
    testbed.add_argument("--coupled", action="store_true", help="plant a coupled negative pair")
    testbed.add_argument("--samples", type=int, default=256, help="samples per task")
    testbed.set_defaults(func=cmd_make_testbed)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvaluatorError, SearchAbortedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
