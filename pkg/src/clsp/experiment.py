"""Experiment configs, resumable grid runs and reports.

A config is a JSON object; every field is optional::

    {
      "corpus": null,              # JSONL corpus path; null -> synthetic stream
      "grammar_dir": null,
      "synth": {...},              # SynthSpec fields for the synthetic stream
      "runs": [[method, sampler], ...],   # explicit cells; null -> methods x samplers
      "methods": ["FINE_TUNE", "EMR", "TR", "TR_EWC", "ORACLE"],
      "samplers": ["dlfs"],
      "seeds": [0, 1, 2, 3, 4],
      "orders": "shuffle",         # "fixed", "shuffle" (one permutation per seed) or a list of task lists
      "schedule": {...},           # TrainSchedule fields
      "parser": {...},             # ParserConfig fields
      "traces": true,
      "checkpoints": false,
      "out": "runs/default"
    }

Each (method, sampler, seed) cell is one stream run.  Rows are appended
to ``runlog.csv`` when a cell finishes, in cell order, so a rerun skips
finished cells and a killed run resumes where it stopped.
"""
from __future__ import annotations

import json
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .continual import MEMORY_METHODS, METHODS, ORACLE, TrainSchedule, oracle_train, run_stream
from .corpus import SynthSpec, generate_synthetic, load_corpus
from .evaluation import RUNLOG_COLUMNS, TRACE_COLUMNS, read_rows, write_rows
from .model import ParserConfig, save_checkpoint
from .sampling import SAMPLERS, save_memory

OUT_ENV = "CLSP_OUTPUT_DIR"
ABORTED = "ABORTED"

# Desk-scale settings used by the acceptance suite: a learning rate that fits
# each synthetic task within the default 10 slow epochs, and the EWC weight
# picked from the {1, 10, 100} grid.
DEFAULT_SCHEDULE = {"lr": 0.01, "ewc_lambda": 100.0}
DEFAULT_RUNS = [["FINE_TUNE", "none"], ["EMR", "random"], ["TR", "dlfs"], ["TR_EWC", "dlfs"], ["ORACLE", "none"],
                ["TR", "random"], ["TR", "lfs"]]


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    grammar_dir: str | None = None
    synth: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["FINE_TUNE", "EMR", "TR", "TR_EWC", "ORACLE"])
    samplers: list = field(default_factory=lambda: ["dlfs"])
    runs: list | None = field(default_factory=lambda: [list(r) for r in DEFAULT_RUNS])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    orders: object = "shuffle"
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    parser: dict = field(default_factory=dict)
    traces: bool = True
    checkpoints: bool = False
    out: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        for m in self.methods:
            if m not in METHODS and m != ORACLE:
                raise ValueError(f"unknown method {m!r}")
        for s in self.samplers:
            if s not in SAMPLERS:
                raise ValueError(f"unknown sampler {s!r}")
        if self.runs is not None:
            for m, s in self.runs:
                if (m not in METHODS and m != ORACLE) or (s not in SAMPLERS and s != "none"):
                    raise ValueError(f"bad run cell {[m, s]!r}")
        if not (self.orders in ("fixed", "shuffle") or isinstance(self.orders, list)):
            raise ValueError("orders must be 'fixed', 'shuffle' or a list of task orders")
        # fail early on bad nested fields
        self.train_schedule()
        self.parser_config()
        if self.corpus is None:
            self.synth_spec()

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def train_schedule(self):
        return TrainSchedule(**self.schedule)

    def parser_config(self):
        return ParserConfig(**self.parser)

    def synth_spec(self):
        return SynthSpec(**self.synth)

    def cells(self):
        """Ordered unique (method, sampler, seed) cells."""
        pairs = self.runs if self.runs is not None else [
            (m, s if m in MEMORY_METHODS else "none") for m in self.methods for s in self.samplers]
        seen, out = set(), []
        for seed in self.seeds:
            for m, s in pairs:
                key = (m, s if m in MEMORY_METHODS else "none", int(seed))
                if key not in seen:
                    seen.add(key)
                    out.append(key)
        return out


def load_tasks(cfg):
    if cfg.corpus is not None:
        return load_corpus(cfg.corpus, cfg.grammar_dir)
    return generate_synthetic(cfg.synth_spec())


def task_order(cfg, tasks, seed):
    if cfg.orders == "fixed":
        return list(tasks)
    by_name = {td.task: td for td in tasks}
    if cfg.orders == "shuffle":
        perm = np.random.default_rng([int(seed), 7]).permutation(len(tasks))
        return [tasks[int(i)] for i in perm]
    idx = cfg.seeds.index(seed) % len(cfg.orders)
    return [by_name[name] for name in cfg.orders[idx]]


def resolve_out(cfg=None, out=None):
    """Output directory: ``--out`` flag, then the environment, then the config."""
    if out:
        return out
    if os.environ.get(OUT_ENV):
        return os.environ[OUT_ENV]
    return cfg.out if cfg is not None else "runs/default"


# ---------------------------------------------------------------------------
# running


def run_cell(tasks, method, sampler, seed, schedule, parser_config, traces=True, checkpoint_dir=None):
    """One stream run; returns ``(runlog rows, trace rows)``."""
    if method == ORACLE:
        res = oracle_train(tasks, schedule, seed, parser_config)
    else:
        res = run_stream(tasks, method, sampler, schedule, seed, parser_config, traces=traces)
    trace_rows = []
    for tr in res.traces:
        for k, p in enumerate(tr.probs, 1):
            trace_rows.append({"seed": seed, "method": method, "sampler": res.rows[0]["sampler"],
                               "action_id": tr.action_id, "action_text": tr.action_text,
                               "origin_task": tr.origin_task, "class": tr.cls, "k": k, "mean_prob": p})
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
        stem = os.path.join(checkpoint_dir, f"{method}_{sampler}_{seed}")
        save_checkpoint(stem + ".npz", res.params, extra={"method": method, "sampler": sampler, "seed": seed})
        for mem in res.memories:
            save_memory(f"{stem}_memory_{mem.task}.jsonl", mem)
    return res.rows, trace_rows


def _cell_job(job):
    cfg_dict, tasks, (method, sampler, seed), ckpt_dir = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        ordered = task_order(cfg, tasks, seed)
        rows, trace_rows = run_cell(ordered, method, sampler, seed, cfg.train_schedule(), cfg.parser_config(),
                                    cfg.traces, ckpt_dir)
        return rows, trace_rows, None
    except Exception as exc:  # a failing cell must not take the grid down
        row = {"seed": seed, "method": method, "sampler": sampler, "task_index": 0, "eval_task": ABORTED,
               "acc": math.nan, "acc_avg": math.nan, "acc_whole": math.nan, "loss_fast": math.nan,
               "loss_slow": math.nan, "wall_ms": math.nan}
        return [row], [], "".join(traceback.format_exception_only(type(exc), exc)).strip()


def _cell_key(row):
    return (row["method"], row["sampler"], int(row["seed"]))


def run_experiment(cfg, out_dir, jobs=1, log=print):
    """Run every pending cell of ``cfg``; returns the number of aborted cells."""
    os.makedirs(out_dir, exist_ok=True)
    runlog = os.path.join(out_dir, "runlog.csv")
    traces_path = os.path.join(out_dir, "traces.csv")
    done = set()
    if os.path.exists(runlog):
        rows = read_rows(runlog)
        kept = [r for r in rows if r["eval_task"] != ABORTED]
        if len(kept) != len(rows):  # retry aborted cells
            write_rows(runlog, kept, RUNLOG_COLUMNS)
        done = {_cell_key(r) for r in kept}
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    pending = [c for c in cfg.cells() if c not in done]
    if not pending:
        log(f"all {len(cfg.cells())} cells already complete in {runlog}")
        return 0
    tasks = load_tasks(cfg)
    ckpt_dir = os.path.join(out_dir, "checkpoints") if cfg.checkpoints else None
    jobs_list = [(cfg.to_dict(), tasks, cell, ckpt_dir) for cell in pending]
    aborted = 0
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_cell_job, jobs_list)
            aborted = _collect(results, pending, runlog, traces_path, log)
    else:
        aborted = _collect(map(_cell_job, jobs_list), pending, runlog, traces_path, log)
    return aborted


def _collect(results, pending, runlog, traces_path, log):
    aborted = 0
    for cell, (rows, trace_rows, error) in zip(pending, results):
        write_rows(runlog, rows, RUNLOG_COLUMNS, append=os.path.exists(runlog))
        if trace_rows:
            write_rows(traces_path, trace_rows, TRACE_COLUMNS, append=os.path.exists(traces_path))
        if error:
            aborted += 1
            log(f"cell {cell} aborted: {error}", file=sys.stderr)
        else:
            final = rows[-1]
            log(f"{cell[0]:<9} {cell[1]:<7} seed={cell[2]}  final acc_whole={float(final['acc_whole']):.3f}")
    return aborted


# ---------------------------------------------------------------------------
# reporting


def _float(x):
    try:
        return float(x)
    except (TypeError, ValueError):
        return math.nan


def summarize(rows):
    """Final ACC_avg / ACC_whole mean and stdev per (method, sampler)."""
    finals = {}
    for r in rows:
        if r["eval_task"] == ABORTED:
            continue
        key = (r["method"], r["sampler"], int(r["seed"]))
        ti = int(r["task_index"])
        if key not in finals or ti > finals[key][0]:
            finals[key] = (ti, _float(r["acc_avg"]), _float(r["acc_whole"]))
    groups = {}
    for (m, s, _), (_, avg, whole) in sorted(finals.items()):
        groups.setdefault((m, s), []).append((avg, whole))
    out = []
    for (m, s), vals in groups.items():
        arr = np.array(vals)
        out.append({"method": m, "sampler": s, "runs": len(vals),
                    "acc_avg_mean": float(arr[:, 0].mean()), "acc_avg_std": float(arr[:, 0].std()),
                    "acc_whole_mean": float(arr[:, 1].mean()), "acc_whole_std": float(arr[:, 1].std())})
    return out


def curves(rows):
    """Seed-mean ACC_whole and ACC_avg after each task, per (method, sampler)."""
    acc = {}
    for r in rows:
        if r["eval_task"] == ABORTED:
            continue
        key = (r["method"], r["sampler"], int(r["task_index"]))
        acc.setdefault(key, {})[int(r["seed"])] = (_float(r["acc_whole"]), _float(r["acc_avg"]))
    out = []
    for (m, s, k), by_seed in sorted(acc.items()):
        vals = np.array(list(by_seed.values()))
        out.append({"method": m, "sampler": s, "task_index": k, "runs": len(vals),
                    "acc_whole_mean": float(vals[:, 0].mean()), "acc_avg_mean": float(vals[:, 1].mean())})
    return out


def trace_extremes(trace_rows, n=2):
    """Per run group, the ``n`` most and least forgotten first-task actions.

    Forgetting is the seed-mean drop of the mean action probability from
    the first snapshot to the last.
    """
    per = {}
    for r in trace_rows:
        key = (r["method"], r["sampler"], r["action_text"], r["class"])
        per.setdefault(key, {}).setdefault(int(r["seed"]), {})[int(r["k"])] = _float(r["mean_prob"])
    drops = {}
    for (m, s, text, cls), by_seed in per.items():
        d = [v[min(v)] - v[max(v)] for v in by_seed.values() if len(v) > 1]
        if d:
            drops.setdefault((m, s), []).append((float(np.mean(d)), text, cls))
    out = []
    for (m, s), items in sorted(drops.items()):
        items.sort(key=lambda z: (-z[0], z[1]))
        picked = [("most_forgotten", z) for z in items[:n]] + [("least_forgotten", z) for z in items[::-1][:n]]
        for kind, (drop, text, cls) in picked:
            out.append({"method": m, "sampler": s, "kind": kind, "action_text": text, "class": cls, "drop": drop})
    return out


def svg_line_chart(series, title, ylabel, width=560, height=360):
    """Self-contained SVG line chart; ``series`` maps label -> [(x, y), ...]."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = [x for pts in series.values() for x, _ in pts] or [1]
    x0, x1 = min(xs), max(xs)
    x1 = x1 if x1 > x0 else x0 + 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - y) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="12">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>']
    for i in range(6):
        y = i / 5
        parts.append(f'<line x1="{left}" y1="{py(y):.1f}" x2="{left + pw}" y2="{py(y):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.1f}</text>')
    for x in sorted(set(xs)):
        parts.append(f'<text x="{px(x):.1f}" y="{top + ph + 18}" text-anchor="middle">{x}</text>')
    parts.append(f'<text x="{left + pw / 2:.0f}" y="{height - 10}" text-anchor="middle">tasks learned</text>')
    parts.append(f'<text x="16" y="{top + ph / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {top + ph / 2:.0f})">{_esc(ylabel)}</text>')
    for i, (label, pts) in enumerate(sorted(series.items())):
        color = palette[i % len(palette)]
        pts = sorted(pts)
        if len(pts) > 1:
            path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
            parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        parts.append(f'<rect x="{left + pw + 12}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{left + pw + 28}" y="{ly}">{_esc(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_report(runlog, out_dir, log=print):
    """Summary, curve and trace tables plus SVG charts; returns the summary rows."""
    os.makedirs(out_dir, exist_ok=True)
    rows = read_rows(runlog) if os.path.getsize(runlog) else []
    if not rows:
        log(f"warning: {runlog} has no rows; writing an empty report", file=sys.stderr)
    summary = summarize(rows)
    curve_rows = curves(rows)
    write_rows(os.path.join(out_dir, "summary.csv"), summary,
               ("method", "sampler", "runs", "acc_avg_mean", "acc_avg_std", "acc_whole_mean", "acc_whole_std"))
    write_rows(os.path.join(out_dir, "curves.csv"), curve_rows,
               ("method", "sampler", "task_index", "runs", "acc_whole_mean", "acc_avg_mean"))
    traces_path = os.path.join(os.path.dirname(os.path.abspath(runlog)), "traces.csv")
    if os.path.exists(traces_path):
        write_rows(os.path.join(out_dir, "trace_extremes.csv"), trace_extremes(read_rows(traces_path)),
                   ("method", "sampler", "kind", "action_text", "class", "drop"))
    for metric, label in (("acc_whole_mean", "ACC_whole"), ("acc_avg_mean", "ACC_avg")):
        series = {}
        for r in curve_rows:
            name = r["method"] if r["sampler"] == "none" else f"{r['method']} ({r['sampler']})"
            series.setdefault(name, []).append((r["task_index"], r[metric]))
        with open(os.path.join(out_dir, f"{label.lower()}.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg_line_chart(series, f"{label} after each task (seed mean)", label))
    for r in summary:
        log(f"{r['method']:<9} {r['sampler']:<7} n={r['runs']}  ACC_avg {r['acc_avg_mean']:.3f}±{r['acc_avg_std']:.3f}"
            f"  ACC_whole {r['acc_whole_mean']:.3f}±{r['acc_whole_std']:.3f}")
    return summary
