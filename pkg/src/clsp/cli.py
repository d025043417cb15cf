"""Command-line entry points: ``generate``, ``run``, ``report`` and ``sample``.

Exit codes: 0 on success, 1 on a runtime error, 2 on a usage error.
The output directory comes from ``--out``, else the ``CLSP_OUTPUT_DIR``
environment variable, else the config.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ClspError
from .experiment import OUT_ENV, ExperimentConfig, resolve_out, run_experiment, write_report


class _UsageError(Exception):
    pass


def cmd_generate(args):
    from .corpus import SynthSpec, generate_synthetic, stream_summary, write_corpus

    if not args.config or not os.path.exists(args.config):
        raise _UsageError(f"spec file not found: {args.config}")
    spec = SynthSpec.load(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    out = args.out or os.environ.get(OUT_ENV) or "synth"
    tasks = generate_synthetic(spec)
    path = write_corpus(out, tasks)
    spec.save(os.path.join(out, "synth.json"))
    print(f"wrote {path}")
    print(f"{'task':<6} {'train':>5} {'valid':>5} {'test':>5} {'actions':>7} {'cross':>5}")
    for r in stream_summary(tasks):
        print(f"{r['task']:<6} {r['train']:>5} {r['valid']:>5} {r['test']:>5} {r['actions']:>7} {r['cross_task']:>5}")
    return 0


def _load_config(args):
    if not args.config:
        return ExperimentConfig()
    if not os.path.exists(args.config):
        raise _UsageError(f"config file not found: {args.config}")
    try:
        return ExperimentConfig.load(args.config)
    except (TypeError, ValueError) as exc:
        raise _UsageError(f"invalid config {args.config}: {exc}") from None


def cmd_run(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.checkpoints:
        cfg.checkpoints = True
    out = resolve_out(cfg, args.out)
    aborted = run_experiment(cfg, out, jobs=args.jobs)
    print(f"run log: {os.path.join(out, 'runlog.csv')}")
    return 1 if aborted else 0


def cmd_report(args):
    runlog = args.runlog
    if runlog is None:
        cfg = _load_config(args) if args.config else None
        runlog = os.path.join(resolve_out(cfg, args.out), "runlog.csv")
    if not os.path.exists(runlog):
        raise _UsageError(f"run log not found: {runlog}")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(runlog)), "report")
    try:
        write_report(runlog, out)
    except (KeyError, ValueError) as exc:
        raise ClspError(f"malformed run log {runlog}: {exc}") from None
    print(f"report written to {out}")
    return 0


def cmd_sample(args):
    from .corpus import load_corpus
    from .model import Parser, ParserConfig
    from .continual import build_params
    from .sampling import make_entries, memory_entropy, save_memory, select_memory, default_support

    if not os.path.exists(args.corpus):
        raise _UsageError(f"corpus not found: {args.corpus}")
    tasks = load_corpus(args.corpus, args.grammar_dir)
    by_name = {td.task: td for td in tasks}
    if args.task not in by_name:
        raise _UsageError(f"task {args.task!r} not in corpus (have {sorted(by_name)})")
    td = by_name[args.task]
    seed = 0 if args.seed is None else args.seed
    entries = make_entries(td.train, td.grammar, td.task)
    features = None
    if args.sampler == "fss":
        parser = Parser(build_params([td], ParserConfig(rng_seed=seed)))
        features = parser.features([tuple(e.utterance.split()) for e in entries])
    mem = select_memory(args.sampler, entries, args.M, seed, td.task, features)
    for note in mem.notes:
        print(f"warning: {note}", file=sys.stderr)
    support = default_support(entries)
    ids = mem.cluster_ids()
    distinct = len(set(ids)) == len(ids) and None not in ids
    out = args.out or os.environ.get(OUT_ENV) or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"memory_{td.task}_{args.sampler}.jsonl")
    save_memory(path, mem)
    report = {"task": td.task, "sampler": args.sampler, "size": len(mem), "capacity": args.M,
              "entropy": memory_entropy(mem, support), "distinct_clusters": distinct, "memory": path}
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser():
    from .sampling import SAMPLERS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="spec (generate) or experiment config (run/report) JSON file")
    common.add_argument("--out", help="output directory (overrides $CLSP_OUTPUT_DIR and the config)")
    common.add_argument("--seed", type=int, help="override the seed (run: restrict to this seed)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes for run")
    p = argparse.ArgumentParser(prog="clsp", description="Continual semantic parsing experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic task stream")
    run = sub.add_parser("run", parents=[common], help="run an experiment grid (resumable)")
    run.add_argument("--checkpoints", action="store_true", help="save final parameters and memories per cell")
    rep = sub.add_parser("report", parents=[common], help="summarise a run log")
    rep.add_argument("runlog", nargs="?", help="runlog.csv (default: <out>/runlog.csv)")
    smp = sub.add_parser("sample", parents=[common], help="run one memory sampler on one task")
    smp.add_argument("--corpus", required=True)
    smp.add_argument("--grammar-dir")
    smp.add_argument("--task", required=True)
    smp.add_argument("--sampler", choices=SAMPLERS, default="dlfs")
    smp.add_argument("-M", type=int, default=10, help="memory capacity")
    return p


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "report": cmd_report, "sample": cmd_sample}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clsp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ClspError, OSError, ValueError, KeyError) as exc:
        print(f"clsp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
