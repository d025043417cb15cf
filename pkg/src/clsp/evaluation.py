"""Exact-match accuracy, continual-learning metrics and per-action traces."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClspError
from .grammar import actions_to_lf
from .logical_forms import canonicalize

RUNLOG_COLUMNS = ("seed", "method", "sampler", "task_index", "eval_task", "acc", "acc_avg",
                  "acc_whole", "loss_fast", "loss_slow", "wall_ms")
TRACE_COLUMNS = ("seed", "method", "sampler", "action_id", "action_text", "origin_task", "class", "k", "mean_prob")


def exact_match(pred, gold):
    """True when both LFs have the same canonical s-expression text."""
    if pred is None:
        return False
    try:
        return canonicalize(str(pred)) == canonicalize(str(gold))
    except ClspError:
        return False


def acc_avg(accs, k=None):
    """Mean of ``acc_{i,k}`` over the first ``k`` tasks (all of ``accs`` by default)."""
    accs = list(accs)
    k = len(accs) if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(accs[:k]) / k


def acc_whole(correct, sizes):
    """Instance-weighted accuracy over the union of test sets.

    ``correct[i]`` and ``sizes[i]`` are the number of exact matches and the
    test-set size of task ``i``.
    """
    total = sum(sizes)
    return sum(correct) / total if total else 0.0


@dataclass
class EvalResult:
    """Lower-triangular table of ``acc_{i,k}`` plus test-set sizes."""

    tasks: list
    sizes: list
    correct: dict = field(default_factory=dict)  # (i, k) -> exact-match count

    def record(self, i, k, n_correct):
        if i > k:
            raise ValueError("task i is evaluated only after it has been trained (i <= k)")
        self.correct[(i, k)] = n_correct

    def acc(self, i, k):
        return self.correct[(i, k)] / self.sizes[i] if self.sizes[i] else 0.0

    def acc_avg(self, k):
        return acc_avg([self.acc(i, k) for i in range(k + 1)])

    def acc_whole(self, k):
        return acc_whole([self.correct[(i, k)] for i in range(k + 1)], self.sizes[:k + 1])

    def matrix(self):
        K = len(self.tasks)
        out = np.full((K, K), np.nan)
        for (i, k) in self.correct:
            out[i, k] = self.acc(i, k)
        return out


def predict(parser, utterances, task, scope, batch_size=64):
    """Greedy predictions (canonical LF text, or None on timeout)."""
    tokens = [tuple(u.split()) for u in utterances]
    out = []
    reg = parser.params.registry
    for start in range(0, len(tokens), batch_size):
        chunk = tokens[start:start + batch_size]
        for ids in parser.greedy_decode(chunk, [task] * len(chunk), scope):
            if ids is None:
                out.append(None)
            else:
                out.append(actions_to_lf([reg[a] for a in ids], scope.grammar).text)
    return out


def count_correct(parser, examples, task, scope):
    """Number of exact matches of greedy decoding over ``(utterance, lf)`` pairs."""
    if not examples:
        return 0
    preds = predict(parser, [u for u, _ in examples], task, scope)
    return sum(exact_match(p, gold) for p, (_, gold) in zip(preds, examples))


# ---------------------------------------------------------------------------
# per-action probability traces


def mean_action_probs(parser, encoded, scope, batch_size=64):
    """Teacher-forced mean ``P(a_t | a_<t, x)`` per gold action id."""
    sums, counts = {}, {}
    for start in range(0, len(encoded), batch_size):
        batch = encoded[start:start + batch_size]
        for ex, probs in zip(batch, parser.step_probs(batch, scope)):
            for aid, p in zip(ex.actions, probs):
                sums[aid] = sums.get(aid, 0.0) + float(p)
                counts[aid] = counts.get(aid, 0) + 1
    return {aid: sums[aid] / counts[aid] for aid in sorted(sums)}


@dataclass
class ActionProbTrace:
    action_id: int
    action_text: str
    origin_task: str
    cls: str  # "cross-task" or "task-specific"
    probs: list = field(default_factory=list)

    def drop(self, a=0, b=1):
        return self.probs[a] - self.probs[b]


def trace_drop_by_class(traces, a=0, b=1):
    """Mean probability drop between snapshots ``a`` and ``b`` per action class."""
    out = {}
    for cls in ("cross-task", "task-specific"):
        drops = [t.drop(a, b) for t in traces if t.cls == cls and len(t.probs) > max(a, b)]
        out[cls] = float(np.mean(drops)) if drops else math.nan
    return out


# ---------------------------------------------------------------------------
# CSV output


def _fmt(value):
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return "" if value is None else str(value)


def write_rows(path, rows, columns, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append or fh.tell() == 0:
            w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
