"""Command-line entry point: ``kgcmi {train,gradcheck,bench,kg validate,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, KgCmiError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_GRADCHECK = 0, 1, 2, 3


class _UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields (all optional)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field; repeatable")


def _load_config(args):
    from .harness.config import RunConfig

    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        return config.with_overrides(args.overrides)
    except (ConfigError, TypeError) as exc:
        raise _UsageError(str(exc)) from exc
    except OSError as exc:
        raise _UsageError(f"cannot read config: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgcmi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="train on a synthetic task; writes metrics.csv and a checkpoint")
    _add_config_args(p)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds; one run per seed under <out>/seed<N>")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    _add_config_args(p)
    p.add_argument("--modules", action="store_true", help="also run the per-module suite")
    p.add_argument("--fresh", action="store_true", help="check the model exactly as initialized (no SSM bias redraw)")
    p.add_argument("--seeds", type=_int_list, default=list(range(20)), help="seeds for the per-module suite")

    p = sub.add_parser("bench", help="time CMM against cross-attention over sequence lengths")
    _add_config_args(p)
    p.add_argument("--lengths", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    p = sub.add_parser("kg", help="knowledge-graph utilities")
    kg_sub = p.add_subparsers(dest="kg_command", metavar="action")
    kg_sub.required = True
    v = kg_sub.add_parser("validate", help="validate a knowledge-graph JSON file")
    v.add_argument("file", type=Path)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its task's train and test splits")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint stem, .npz or .json")
    p.add_argument("--out", type=Path, help="metrics CSV path (default: stdout)")
    return parser


def _cmd_train(args) -> int:
    from .harness.train import train

    config = _load_config(args)
    seeds = args.seeds or config.seeds
    out = args.out if args.out is not None else Path(config.out_dir)
    if not seeds:
        result = train(config, out_dir=out)
        print(f"wrote {result.metrics_path} and {result.checkpoint_path}.npz/.json")
        return EXIT_OK
    for seed in seeds:
        result = train(config.replace(seed=seed), out_dir=out / f"seed{seed}")
        print(f"seed {seed}: wrote {result.metrics_path}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .harness.gradcheck import gradcheck, module_suite

    config = _load_config(args)
    report = gradcheck(config, randomize_ssm=not args.fresh)
    print("full model (d=%d%s)" % (min(config.d, 4), ", as initialized" if args.fresh else ""))
    print(report.format())
    ok = report.ok
    if args.modules:
        mods = module_suite(args.seeds)
        print(f"\nmodules ({len(args.seeds)} seeds)")
        print(mods.format())
        ok = ok and mods.ok
    return EXIT_OK if ok else EXIT_GRADCHECK


def _cmd_bench(args) -> int:
    from .harness.bench import run_benchmark

    config = _load_config(args)
    try:
        result = run_benchmark(args.lengths, d=config.d, N=config.ssm_state, repeats=args.repeats, seed=config.seed)
    except ConfigError as exc:
        raise _UsageError(str(exc)) from exc
    text = result.to_csv()
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "x") as fh:
            fh.write(text)
    for note in result.notes:
        print(f"note: {note}", file=sys.stderr)
    for arch, slope in result.slopes.items():
        print(f"log-log slope {arch}: {slope:.3f}", file=sys.stderr)
    return EXIT_OK


def _cmd_kg(args) -> int:
    from .kge import KnowledgeGraph

    graph = KnowledgeGraph.load(args.file)
    kinds = [n.kind for n in graph.nodes]
    print(f"{args.file}: valid ({len(graph)} nodes: {kinds.count('organ')} organs, "
          f"{kinds.count('finding')} findings)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.tasks import gen_synthetic_task
    from .harness.train import evaluate, write_metrics
    from .model import KgCmiModel

    params, config = load_checkpoint(args.checkpoint)
    task = gen_synthetic_task(config)
    model = KgCmiModel(config, task.graph, task.tokenizer, params=params)
    rows = [evaluate(model, task.train, -1, "train"), evaluate(model, task.test, -1, "test")]
    write_metrics(args.out if args.out is not None else sys.stdout, rows)
    return EXIT_OK


_COMMANDS = {"train": _cmd_train, "gradcheck": _cmd_gradcheck, "bench": _cmd_bench, "kg": _cmd_kg, "eval": _cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kgcmi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KgCmiError, OSError, ValueError) as exc:
        print(f"kgcmi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
