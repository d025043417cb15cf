"""Corpus loading and the synthetic multi-task stream generator.

Corpus files are JSONL, one record per line::

    {"task": "geo", "split": "train", "utterance": "how many rivers", "lf": "(count river)"}

with one grammar file ``<task>.grammar`` per task next to them (or in a
separate grammar directory).

The synthetic generator builds ``num_tasks`` grammars over a single start
symbol ``Q`` and a single slot type ``e``.  Every production is a
``Q -> template`` rule whose template holds between one and ``max_arity`` ``e`` holes.
``shared_rule_count`` rules and ``shared_leaf_count`` entity tokens are
identical in every task, so they map to the same global APPLY and GEN
actions; the remaining rules and tokens are private to their task.  Rule frequencies inside a task follow a
Zipf law, and each utterance is a fixed word pattern per rule with the
entity tokens filled in, so the mapping is noise free.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ClspError, MalformedRecord, NotDerivable
from .grammar import Grammar, Rule, lf_to_actions
from .logical_forms import parse_lf

SPLITS = ("train", "valid", "test")
SPLIT_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class TaskData:
    task: str
    grammar: Grammar
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        return getattr(self, name)

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}


# ---------------------------------------------------------------------------
# loading


def read_records(path):
    """Parse and validate the JSONL records of a corpus file."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise MalformedRecord("record must be a JSON object", lineno)
            for key in ("task", "split", "utterance", "lf"):
                if not isinstance(rec.get(key), str):
                    raise MalformedRecord(f"missing or non-string field {key!r}", lineno)
            if rec["split"] not in SPLITS:
                raise MalformedRecord(f"unknown split {rec['split']!r}", lineno)
            if not rec["utterance"].split():
                raise MalformedRecord("empty utterance", lineno)
            try:
                lf = parse_lf(rec["lf"])
            except ClspError as exc:
                raise MalformedRecord(f"bad logical form: {exc}", lineno) from None
            records.append((lineno, rec["task"], rec["split"], rec["utterance"], lf))
    return records


def load_corpus(path, grammar_dir=None, order=None):
    """Load a corpus file into :class:`TaskData` objects.

    Tasks appear in first-appearance order unless ``order`` lists them.
    Every LF is checked for derivability under its task grammar.
    """
    grammar_dir = grammar_dir or os.path.dirname(os.path.abspath(path))
    records = read_records(path)
    tasks = {}
    for lineno, task, split, utt, lf in records:
        td = tasks.get(task)
        if td is None:
            gpath = os.path.join(grammar_dir, f"{task}.grammar")
            if not os.path.exists(gpath):
                raise MalformedRecord(f"no grammar file {task}.grammar for task {task!r}", lineno)
            td = tasks[task] = TaskData(task, Grammar.load(gpath))
        try:
            lf_to_actions(lf, td.grammar)
        except NotDerivable as exc:
            raise NotDerivable(f"task {task!r}, line {lineno}: {exc}", index=lineno, task=task) from None
        td.split(split).append((utt, lf.text))
    if order is not None:
        missing = [t for t in order if t not in tasks]
        if missing:
            raise KeyError(f"tasks not in corpus: {missing}")
        return [tasks[t] for t in order]
    return list(tasks.values())


def write_corpus(out_dir, tasks, corpus_name="corpus.jsonl"):
    """Write grammars and one JSONL corpus file; returns the corpus path."""
    os.makedirs(out_dir, exist_ok=True)
    for td in tasks:
        with open(os.path.join(out_dir, f"{td.task}.grammar"), "w", encoding="utf-8") as fh:
            fh.write(td.grammar.to_text())
    path = os.path.join(out_dir, corpus_name)
    with open(path, "w", encoding="utf-8") as fh:
        for td in tasks:
            for split in SPLITS:
                for utt, lf in td.split(split):
                    fh.write(json.dumps({"task": td.task, "split": split, "utterance": utt, "lf": lf}) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthSpec:
    num_tasks: int = 4
    shared_rule_count: int = 2
    private_rule_count: int = 6
    leaf_vocab_size: int = 8
    shared_leaf_count: int = 2
    max_arity: int = 2
    template_depth: int = 2
    template_skew: float = 1.5
    examples_per_task: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("num_tasks", "private_rule_count", "leaf_vocab_size", "max_arity", "examples_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("shared_rule_count", "shared_leaf_count", "template_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.shared_leaf_count > self.leaf_vocab_size:
            raise ValueError("shared_leaf_count cannot exceed leaf_vocab_size")
        if self.template_skew < 0:
            raise ValueError("template_skew must be >= 0")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


_ONSETS = "b c d f g h k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


class _WordMaker:
    """Distinct pronounceable pseudo-words drawn from a seeded RNG."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set()

    def __call__(self, syllables=2):
        while True:
            w = "".join(self.rng.choice(_ONSETS) + self.rng.choice(_VOWELS) for _ in range(syllables))
            if w not in self.used:
                self.used.add(w)
                return w


@dataclass
class _SynthRule:
    rule: Rule
    words: list  # word pattern, "{e}" marks an entity position


def _make_rule(lhs, label, arity, depth, words, rng):
    """A ``Q -> template`` rule and its verbalisation.

    The template root has ``arity`` arguments; each argument is a chain of
    up to ``depth`` unary inner labels ending in an ``e`` hole, so rules
    differ in shape as well as in labels.
    """
    template, pattern = "(" + label, [words()]
    for _ in range(arity):
        chain = [words(3) for _ in range(int(rng.integers(0, depth + 1)))]
        template += " " + "".join(f"({c} " for c in chain) + "e" + ")" * len(chain)
        pattern += chain + ["{e}"]
    template += ")"
    g = Grammar.from_text(f"start {lhs}\nslot e : x\n{lhs} -> {template}\n")
    return _SynthRule(g.productions[0], pattern)


def zipf_weights(n, skew):
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def sample_template_indices(n_templates, skew, size, rng):
    """Template draws with Zipf(``skew``) frequencies over a fixed ranking."""
    return rng.choice(n_templates, size=size, p=zipf_weights(n_templates, skew))


def _verbalize(pattern, tokens):
    it = iter(tokens)
    return " ".join(next(it) if w == "{e}" else w for w in pattern)


def generate_synthetic(spec):
    """Build task grammars and splits; returns a list of :class:`TaskData`.

    Deterministic in ``spec``.  Examples are drawn until each task has
    ``examples_per_task`` distinct (utterance, LF) pairs (or the LF space
    is exhausted), shuffled and split 70/10/20, so no example occurs in two
    splits.
    """
    rng = np.random.default_rng(spec.seed)
    words = _WordMaker(rng)
    shared = [_make_rule("Q", f"s{i}", int(rng.integers(1, spec.max_arity + 1)),
                          spec.template_depth, words, rng)
              for i in range(spec.shared_rule_count)]
    shared_tokens = [words() for _ in range(spec.shared_leaf_count)]
    out = []
    for k in range(spec.num_tasks):
        name = f"t{k + 1}"
        private = [_make_rule("Q", f"{name}r{j}", int(rng.integers(1, spec.max_arity + 1)),
                          spec.template_depth, words, rng)
                   for j in range(spec.private_rule_count)]
        tokens = shared_tokens + [words() for _ in range(spec.leaf_vocab_size - spec.shared_leaf_count)]
        rules = shared + private
        text = ["start Q", "slot e : " + " ".join(tokens)] + [r.rule.text for r in rules]
        grammar = Grammar.from_text("\n".join(text) + "\n", name=name)
        # frequency rank of each rule is a per-task permutation
        ranking = [rules[i] for i in rng.permutation(len(rules))]
        capacity = sum(len(tokens) ** r.words.count("{e}") for r in ranking)
        target = min(spec.examples_per_task, capacity)
        seen, examples = set(), []
        attempts = 0
        while len(examples) < target and attempts < 50 * spec.examples_per_task:
            attempts += 1
            r = ranking[int(sample_template_indices(len(ranking), spec.template_skew, 1, rng)[0])]
            fill = [tokens[int(i)] for i in rng.integers(0, len(tokens), r.words.count("{e}"))]
            lf = _fill_template(r.rule.template, iter(fill))
            if lf in seen:
                continue
            seen.add(lf)
            examples.append((_verbalize(r.words, fill), lf))
        examples = [examples[int(i)] for i in rng.permutation(len(examples))]
        n_train = int(round(SPLIT_RATIOS[0] * len(examples)))
        n_valid = int(round(SPLIT_RATIOS[1] * len(examples)))
        out.append(TaskData(name, grammar, examples[:n_train], examples[n_train:n_train + n_valid],
                            examples[n_train + n_valid:]))
    return out


def _fill_template(template, fill):
    if isinstance(template, str):
        return next(fill) if template == "e" else template
    return "(" + " ".join(_fill_template(t, fill) for t in template) + ")"


def stream_summary(tasks):
    """Per-task sizes and the cross-task share of grammar actions."""
    sets = [set(td.grammar.actions()) for td in tasks]
    rows = []
    for td, acts in zip(tasks, sets):
        cross = sum(1 for a in acts if sum(a in s for s in sets) >= 2)
        rows.append({"task": td.task, **td.counts(), "actions": len(acts), "cross_task": cross})
    return rows
