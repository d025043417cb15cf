"""Continual training over a task stream.

Methods:

``FINE_TUNE``  train on each new task alone.
``EMR``        replay minibatches from the memories of earlier tasks.
``EWC``        quadratic penalty towards the previous parameters, weighted by
               a Fisher diagonal estimated on the memories (no replay).
``TR``         fast/slow training with replay: a fast stage fits only the
               embeddings of actions never seen before, then a slow stage
               trains the shared parameters and the current task's own
               parameters, with replay batches touching shared ones only.
``TR_EWC``     ``TR`` plus the EWC penalty.

All parameters, words and actions of the whole stream are registered
before training starts.  An action is shared (tag ``"g"``) when it occurs
in the grammars of two or more tasks and belongs to the first task whose
grammar has it otherwise.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMemory
from .evaluation import (ActionProbTrace, EvalResult, count_correct, mean_action_probs)
from .grammar import action_set_of
from .model import (SHARED, ActionScope, Adam, Parser, ParserConfig, ParserParams,
                    encode_example, task_tag)
from .sampling import make_entries, select_memory

METHODS = ("FINE_TUNE", "EMR", "EWC", "TR", "TR_EWC")
ORACLE = "ORACLE"
MEMORY_METHODS = frozenset({"EMR", "EWC", "TR", "TR_EWC"})
REPLAY_METHODS = frozenset({"EMR", "TR", "TR_EWC"})
EWC_METHODS = frozenset({"EWC", "TR_EWC"})
FAST_SLOW_METHODS = frozenset({"TR", "TR_EWC"})


@dataclass
class TrainSchedule:
    epochs_fast: int = 5
    epochs_slow: int = 10
    lr: float = 0.0025
    lr_fast: float | None = None
    batch_size: int = 16
    ewc_lambda: float = 10.0
    replay_batches_per_epoch: int = 1
    capacity: int = 10
    action_scope: str = "seen"  # "seen": union grammar of tasks so far; "task": own grammar

    def __post_init__(self):
        for name in ("epochs_fast", "epochs_slow", "batch_size", "replay_batches_per_epoch", "capacity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0 or self.ewc_lambda < 0:
            raise ValueError("lr must be positive and ewc_lambda nonnegative")
        if self.action_scope not in ("seen", "task"):
            raise ValueError("action_scope must be 'seen' or 'task'")

    @property
    def fast_lr(self):
        return self.lr if self.lr_fast is None else self.lr_fast


@dataclass
class ContinualState:
    k: int = 0
    memories: list = field(default_factory=list)
    seen_actions: set = field(default_factory=set)
    snapshot: dict | None = None
    fisher: dict | None = None
    ewc_lambda: float = 0.0

    def ewc_penalty(self, tensors):
        """``lambda * sum_j F_j (theta_j - theta*_j)^2``; zero without a snapshot."""
        if self.fisher is None:
            return 0.0
        total = 0.0
        for name, F in self.fisher.items():
            diff = tensors[name] - self.snapshot[name]
            total += float(np.sum(F * diff * diff))
        return self.ewc_lambda * total

    def ewc_gradient(self, tensors):
        if self.fisher is None:
            return {}
        return {name: 2.0 * self.ewc_lambda * F * (tensors[name] - self.snapshot[name])
                for name, F in self.fisher.items()}


# ---------------------------------------------------------------------------
# setup


def action_origins(tasks):
    """Map action -> (origin task, is_cross_task) over the task grammars."""
    counts = Counter()
    origin = {}
    for td in tasks:
        for a in td.grammar.actions():
            counts[a] += 1
            origin.setdefault(a, td.task)
    return {a: (origin[a], counts[a] >= 2) for a in origin}


def build_params(tasks, config):
    """Parameters with every word, action and task of the stream registered."""
    params = ParserParams(config)
    words = sorted({w for td in tasks for utt, _ in td.train for w in utt.split()})
    params.add_words(words)
    origins = action_origins(tasks)
    for td in tasks:
        acts = [a for a in td.grammar.actions() if a not in params.registry]
        params.add_actions(acts, [SHARED if origins[a][1] else task_tag(origins[a][0]) for a in acts])
    for td in tasks:
        params.add_task(td.task)
    return params


class _Stream:
    """Per-run caches: scopes, encoded splits and action sets."""

    def __init__(self, tasks, params, action_scope):
        self.tasks = tasks
        self.params = params
        self.action_scope = action_scope
        self._scopes = {}
        self._encoded = {}
        self.action_sets = [frozenset(params.registry.id(a) for a in action_set_of(td.train, td.grammar))
                            for td in tasks]

    def scope(self, k, i=None):
        """Scope used while training task ``k`` (evaluating task ``i``)."""
        key = ("seen", k) if self.action_scope == "seen" else ("task", k if i is None else i)
        sc = self._scopes.get(key)
        if sc is None:
            if key[0] == "seen":
                grammars = [td.grammar for td in self.tasks[:k + 1]]
                g = grammars[0].union(*grammars[1:]) if len(grammars) > 1 else grammars[0]
            else:
                g = self.tasks[key[1]].grammar
            sc = self._scopes[key] = ActionScope(g, self.params)
        return sc

    def encoded(self, i, split="train"):
        key = (i, split)
        if key not in self._encoded:
            td = self.tasks[i]
            self._encoded[key] = [encode_example(u, lf, td.grammar, self.params, td.task)
                                  for u, lf in td.split(split)]
        return self._encoded[key]

    def encode_memory(self, memory, i):
        td = self.tasks[i]
        return [encode_example(e.utterance, e.lf, td.grammar, self.params, td.task) for e in memory.entries]


def _batches(examples, batch_size, rng):
    order = rng.permutation(len(examples))
    return [[examples[j] for j in order[s:s + batch_size]] for s in range(0, len(examples), batch_size)]


def _train_step(parser, opt, batch, scope, mask, lr, state=None):
    loss, grads = parser.loss_and_grad(batch, scope)
    penalty = 0.0
    if state is not None and state.fisher is not None:
        penalty = state.ewc_penalty(parser.params.tensors)
        for name, g in state.ewc_gradient(parser.params.tensors).items():
            grads[name] = grads[name] + g
    opt.step(parser.params.tensors, grads, mask, lr)
    return loss, penalty


# ---------------------------------------------------------------------------
# stages


def unseen_actions(task_actions, state):
    """``A^(k)`` minus every action of earlier tasks."""
    return set(task_actions) - state.seen_actions


def fast_stage(parser, opt, examples, scope, unseen, schedule, rng):
    """Train only the embedding rows of ``unseen`` action ids.

    Returns the mean batch loss of the last epoch (nan when nothing ran).
    """
    if not unseen or not examples or schedule.epochs_fast == 0:
        return float("nan")
    mask = parser.params.action_row_mask(unseen)
    losses = []
    for _ in range(schedule.epochs_fast):
        losses = [_train_step(parser, opt, b, scope, mask, schedule.fast_lr)[0]
                  for b in _batches(examples, schedule.batch_size, rng)]
    return float(np.mean(losses))


def slow_stage(parser, opt, examples, scope, state, schedule, rng, current_mask, replay=(), replay_mask=None):
    """Train on the current task, interleaving replay batches evenly.

    ``replay`` is a list of encoded memories.  Every step adds the EWC
    gradient when ``state`` carries a Fisher diagonal.  Returns the mean
    over the last epoch of the current-task loss plus the summed mean
    replay losses plus the penalty, i.e. the logged ``L_CL``.
    """
    if not examples or schedule.epochs_slow == 0:
        return float("nan")
    replay_mask = current_mask if replay_mask is None else replay_mask
    last = float("nan")
    for _ in range(schedule.epochs_slow):
        batches = [("cur", b) for b in _batches(examples, schedule.batch_size, rng)]
        extra = []
        for m_idx, mem in enumerate(replay):
            if not mem:
                continue
            for r in range(schedule.replay_batches_per_epoch):
                picked = rng.permutation(len(mem))[:schedule.batch_size]
                extra.append((m_idx, [mem[j] for j in picked]))
        # spread replay batches evenly between current-task batches
        plan = list(batches)
        n = len(batches)
        for j, item in enumerate(extra):
            plan.insert(min(len(plan), (j + 1) * (n + len(extra)) // (len(extra) + 1)), item)
        cur_losses, mem_losses, penalties = [], {}, []
        for kind, batch in plan:
            if kind == "cur":
                loss, pen = _train_step(parser, opt, batch, scope, current_mask, schedule.lr, state)
                cur_losses.append(loss)
            else:
                loss, pen = _train_step(parser, opt, batch, scope, replay_mask, schedule.lr, state)
                mem_losses.setdefault(kind, []).append(loss)
            penalties.append(pen)
        last = (float(np.mean(cur_losses)) + sum(float(np.mean(v)) for v in mem_losses.values())
                + float(np.mean(penalties)))
    return last


def compute_fisher(parser, examples, scope):
    """Diagonal empirical Fisher: mean squared per-instance NLL gradient."""
    if not examples:
        raise EmptyMemory("cannot estimate the Fisher diagonal from an empty memory")
    fisher = {k: np.zeros_like(v) for k, v in parser.params.tensors.items()}
    for ex in examples:
        _, grads = parser.loss_and_grad([ex], scope)
        for k, g in grads.items():
            fisher[k] += g * g
    for k in fisher:
        fisher[k] /= len(examples)
    return fisher


# ---------------------------------------------------------------------------
# runs


@dataclass
class StreamResult:
    rows: list
    traces: list
    evals: EvalResult
    params: ParserParams
    state: ContinualState
    memories: list


def _masks(params, method, task):
    if method in FAST_SLOW_METHODS:
        return params.mask_for({SHARED, task_tag(task)}), params.mask_for({SHARED})
    everything = params.mask_for(params.all_tags())
    return everything, everything


def run_stream(tasks, method, sampler="dlfs", schedule=None, seed=0, config=None, traces=True,
               callback=None):
    """Train sequentially on ``tasks`` and evaluate every seen test set after each task.

    ``callback(stage, k, before, params)`` is invoked after each stage
    (``"fast"``, ``"slow"``) with a copy of the tensors taken before it.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    schedule = schedule or TrainSchedule()
    config = config or ParserConfig()
    config = ParserConfig(**{**config.__dict__, "rng_seed": seed})
    params = build_params(tasks, config)
    parser = Parser(params)
    opt = Adam()
    stream = _Stream(tasks, params, schedule.action_scope)
    state = ContinualState(ewc_lambda=schedule.ewc_lambda)
    rng = np.random.default_rng([seed, 1])
    origins = action_origins(tasks)
    evals = EvalResult([td.task for td in tasks], [len(td.test) for td in tasks])
    rows, memories = [], []
    first_encoded = stream.encoded(0)
    first_ids = sorted({a for ex in first_encoded for a in ex.actions})
    trace_list = []
    if traces:
        reg = params.registry
        for aid in first_ids:
            origin, cross = origins[reg[aid]]
            trace_list.append(ActionProbTrace(aid, str(reg[aid]), origin,
                                              "cross-task" if cross else "task-specific"))
    sampler_name = sampler if method in MEMORY_METHODS else "none"

    for k, td in enumerate(tasks):
        t0 = time.perf_counter()
        state.k = k
        examples = stream.encoded(k)
        scope = stream.scope(k)
        cur_mask, rep_mask = _masks(params, method, td.task)
        loss_fast = float("nan")
        if method in FAST_SLOW_METHODS:
            before = params.copy_tensors() if callback else None
            unseen = unseen_actions(stream.action_sets[k], state)
            loss_fast = fast_stage(parser, opt, examples, scope, unseen, schedule, rng)
            if callback:
                callback("fast", k, before, params)
        replay = []
        if method in REPLAY_METHODS:
            replay = [stream.encode_memory(mem, i) for i, mem in enumerate(memories)]
        before = params.copy_tensors() if callback else None
        loss_slow = slow_stage(parser, opt, examples, scope,
                               state if method in EWC_METHODS else None,
                               schedule, rng, cur_mask, replay, rep_mask)
        if callback:
            callback("slow", k, before, params)
        state.seen_actions |= stream.action_sets[k]

        if method in MEMORY_METHODS:
            entries = make_entries(td.train, td.grammar, td.task)
            feats = (lambda ents=entries: parser.features([tuple(e.utterance.split()) for e in ents]))
            memories.append(select_memory(sampler, entries, schedule.capacity, seed * 1000 + k, td.task, feats))
            state.memories = memories
        if method in EWC_METHODS:
            mem_examples = [ex for i, mem in enumerate(memories) for ex in stream.encode_memory(mem, i)]
            state.snapshot = params.copy_tensors()
            state.fisher = compute_fisher(parser, mem_examples, scope)
        wall_ms = (time.perf_counter() - t0) * 1000.0

        for i in range(k + 1):
            evals.record(i, k, count_correct(parser, tasks[i].test, tasks[i].task, stream.scope(k, i)))
        if traces:
            probs = mean_action_probs(parser, first_encoded, stream.scope(k, 0))
            for tr in trace_list:
                tr.probs.append(probs.get(tr.action_id, float("nan")))
        for i in range(k + 1):
            rows.append({"seed": seed, "method": method, "sampler": sampler_name, "task_index": k + 1,
                         "eval_task": tasks[i].task, "acc": evals.acc(i, k), "acc_avg": evals.acc_avg(k),
                         "acc_whole": evals.acc_whole(k), "loss_fast": loss_fast, "loss_slow": loss_slow,
                         "wall_ms": wall_ms})
    return StreamResult(rows, trace_list, evals, params, state, memories)


def oracle_train(tasks, schedule=None, seed=0, config=None):
    """Joint training on all tasks; one row evaluated on the combined test sets."""
    schedule = schedule or TrainSchedule()
    config = config or ParserConfig()
    config = ParserConfig(**{**config.__dict__, "rng_seed": seed})
    params = build_params(tasks, config)
    parser = Parser(params)
    opt = Adam()
    K = len(tasks)
    stream = _Stream(tasks, params, schedule.action_scope)
    rng = np.random.default_rng([seed, 1])
    t0 = time.perf_counter()
    examples = [ex for i in range(K) for ex in stream.encoded(i)]
    scope = stream.scope(K - 1)
    loss = slow_stage(parser, opt, examples, scope, None, schedule, rng, params.mask_for(params.all_tags()))
    wall_ms = (time.perf_counter() - t0) * 1000.0
    evals = EvalResult([td.task for td in tasks], [len(td.test) for td in tasks])
    for i in range(K):
        evals.record(i, K - 1, count_correct(parser, tasks[i].test, tasks[i].task, stream.scope(K - 1, i)))
    whole = evals.acc_whole(K - 1)
    row = {"seed": seed, "method": ORACLE, "sampler": "none", "task_index": K, "eval_task": "ALL",
           "acc": whole, "acc_avg": evals.acc_avg(K - 1), "acc_whole": whole,
           "loss_fast": float("nan"), "loss_slow": loss, "wall_ms": wall_ms}
    return StreamResult([row], [], evals, params, ContinualState(), [])
