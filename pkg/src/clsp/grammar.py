"""Grammars, APPLY/GEN actions and the depth-first transition system.

Grammar file format::

    # comment
    start Q
    slot ent : city river lake
    Q -> (count ent)
    Q -> (largest E)
    E -> (river_in ent)

The right-hand side of a production is an s-expression template.  Atoms
naming a nonterminal or a slot type are holes; every other atom is a
literal label.  A template may span several tree levels, which is how
pre-collapsed idioms are written.  Holes are filled depth-first, leftmost
first: a nonterminal hole by an APPLY action, a slot hole by a GEN action.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import (AmbiguousDerivation, GrammarError, IncompleteTree,
                     InvalidAction, NotDerivable)
from .logical_forms import from_tree, parse_lf, parse_sexpr

APPLY = "APPLY"
GEN = "GEN"


@dataclass(frozen=True)
class Rule:
    lhs: str
    template: object = field(compare=False)
    text: str = ""

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class Action:
    """An APPLY(rule) or GEN(slot, token) transition.

    Equality is by content so actions from different task grammars that
    share rule text or slot token are the same action.
    """

    kind: str
    rule: str = ""
    slot: str = ""
    token: str = ""

    @classmethod
    def apply(cls, rule):
        return cls(APPLY, rule=rule.text if isinstance(rule, Rule) else rule)

    @classmethod
    def gen(cls, slot, token):
        return cls(GEN, slot=slot, token=token)

    def __str__(self):
        if self.kind == APPLY:
            return f"APPLY({self.rule})"
        return f"GEN({self.slot}, {self.token})"


def _template_text(item):
    if isinstance(item, str):
        return item
    return "(" + " ".join(_template_text(x) for x in item) + ")"


def _to_tuple(item):
    return item if isinstance(item, str) else tuple(_to_tuple(x) for x in item)


class Grammar:
    """Immutable set of productions plus generable tokens per slot type."""

    def __init__(self, start, productions, leaf_vocab, name=""):
        self.name = name
        self.start = start
        self.productions = tuple(productions)
        self.leaf_vocab = {s: tuple(toks) for s, toks in leaf_vocab.items()}
        self.nonterminals = frozenset(r.lhs for r in self.productions)
        self.by_lhs = {}
        for rule in self.productions:
            self.by_lhs.setdefault(rule.lhs, []).append(rule)
        self.rules_by_text = {r.text: r for r in self.productions}
        self._validate()

    # -- construction ------------------------------------------------
    @classmethod
    def from_text(cls, text, name=""):
        start = None
        rules, vocab, seen = [], {}, set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" in line:
                lhs, rhs = (part.strip() for part in line.split("->", 1))
                if not lhs or " " in lhs or not rhs:
                    raise GrammarError(f"line {lineno}: malformed production {raw!r}")
                template = _to_tuple(parse_sexpr(rhs))
                rtext = f"{lhs} -> {_template_text(template)}"
                if rtext not in seen:
                    seen.add(rtext)
                    rules.append(Rule(lhs, template, rtext))
            elif line.startswith("slot "):
                head, _, toks = line[5:].partition(":")
                slot = head.strip()
                if not slot or not _:
                    raise GrammarError(f"line {lineno}: malformed slot declaration {raw!r}")
                bucket = vocab.setdefault(slot, [])
                for tok in toks.split():
                    if tok not in bucket:
                        bucket.append(tok)
            elif line.startswith("start "):
                start = line[6:].strip()
            else:
                raise GrammarError(f"line {lineno}: cannot parse {raw!r}")
        if start is None:
            raise GrammarError("missing start declaration")
        return cls(start, rules, vocab, name=name)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            name = os.path.splitext(os.path.basename(path))[0]
            return cls.from_text(fh.read(), name=name)

    def to_text(self):
        lines = [f"start {self.start}"]
        for slot, toks in self.leaf_vocab.items():
            lines.append(f"slot {slot} : {' '.join(toks)}")
        lines.extend(r.text for r in self.productions)
        return "\n".join(lines) + "\n"

    def union(self, *others):
        """Merge productions and slot vocabularies; start symbols must agree."""
        rules = list(self.productions)
        seen = {r.text for r in rules}
        vocab = {s: list(t) for s, t in self.leaf_vocab.items()}
        for g in others:
            if g.start != self.start:
                raise GrammarError("cannot merge grammars with different start symbols")
            for r in g.productions:
                if r.text not in seen:
                    seen.add(r.text)
                    rules.append(r)
            for s, toks in g.leaf_vocab.items():
                bucket = vocab.setdefault(s, [])
                bucket.extend(t for t in toks if t not in bucket)
        return Grammar(self.start, rules, vocab, name="+".join([self.name] + [g.name for g in others]))

    # -- checks --------------------------------------------------------
    def is_symbol(self, atom):
        return atom in self.nonterminals or atom in self.leaf_vocab

    def holes(self, template):
        """Hole symbols of a template in depth-first order."""
        if isinstance(template, str):
            return [template] if self.is_symbol(template) else []
        out = []
        for i, item in enumerate(template):
            if i == 0:
                if not isinstance(item, str) or self.is_symbol(item):
                    raise GrammarError(f"template head must be a literal label: {_template_text(template)}")
                continue
            out.extend(self.holes(item))
        return out

    def _validate(self):
        if self.start not in self.nonterminals:
            raise GrammarError(f"start symbol {self.start!r} has no production")
        clash = self.nonterminals & set(self.leaf_vocab)
        if clash:
            raise GrammarError(f"names used as both nonterminal and slot: {sorted(clash)}")
        for rule in self.productions:
            self.holes(rule.template)
        for slot, toks in self.leaf_vocab.items():
            if not toks:
                raise GrammarError(f"slot {slot!r} has no tokens")
        # every nonterminal must derive a finite tree
        productive = set(self.leaf_vocab)
        changed = True
        while changed:
            changed = False
            for rule in self.productions:
                if rule.lhs not in productive and all(h in productive for h in self.holes(rule.template)):
                    productive.add(rule.lhs)
                    changed = True
        dead = self.nonterminals - productive
        if dead:
            raise GrammarError(f"nonterminals derive no finite tree: {sorted(dead)}")
        # unit cycles would make derivations infinite
        units = {nt: [r.template for r in rs if isinstance(r.template, str) and r.template in self.nonterminals]
                 for nt, rs in self.by_lhs.items()}
        for nt in self.nonterminals:
            stack, seen = list(units[nt]), set()
            while stack:
                x = stack.pop()
                if x == nt:
                    raise GrammarError(f"unit-rule cycle through {nt!r}")
                if x not in seen:
                    seen.add(x)
                    stack.extend(units.get(x, []))

    # -- action inventory ----------------------------------------------
    def actions(self):
        out = [Action.apply(r) for r in self.productions]
        for slot, toks in self.leaf_vocab.items():
            out.extend(Action.gen(slot, t) for t in toks)
        return out

    def actions_for(self, symbol):
        if symbol in self.nonterminals:
            return [Action.apply(r) for r in self.by_lhs[symbol]]
        if symbol in self.leaf_vocab:
            return [Action.gen(symbol, t) for t in self.leaf_vocab[symbol]]
        return []

    def __repr__(self):
        return f"Grammar({self.name!r}, {len(self.productions)} rules, slots={sorted(self.leaf_vocab)})"


@dataclass(frozen=True)
class ActionSequence:
    actions: tuple

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]


@dataclass(frozen=True)
class DerivationState:
    """Frontier stack of open holes; the top is the last element."""

    frontier: tuple

    @classmethod
    def initial(cls, g):
        return cls((g.start,))

    @property
    def done(self):
        return not self.frontier

    @property
    def top(self):
        return self.frontier[-1] if self.frontier else None

    def advance(self, action, g):
        if not self.frontier:
            raise InvalidAction(-1, "derivation already complete")
        rest = self.frontier[:-1]
        if action.kind == APPLY:
            rule = g.rules_by_text[action.rule]
            return DerivationState(rest + tuple(reversed(g.holes(rule.template))))
        return DerivationState(rest)


def applicable_actions(state, g):
    """Actions legal at ``state``: APPLY for a nonterminal top, GEN for a slot top."""
    if state.done:
        return set()
    return set(g.actions_for(state.top))


def _is_applicable(action, state, g):
    top = state.top
    if top is None:
        return False
    if action.kind == APPLY:
        rule = g.rules_by_text.get(action.rule)
        return rule is not None and rule.lhs == top
    return action.slot == top and top in g.leaf_vocab and action.token in g.leaf_vocab[top]


def _fill(template, g, pop):
    if isinstance(template, str):
        return pop() if g.is_symbol(template) else template
    return [template[0]] + [_fill(item, g, pop) for item in template[1:]]


def actions_to_lf(seq, g):
    """Replay actions from the start symbol and return the finished LF."""
    actions = list(seq)
    pos = [0]
    state = DerivationState.initial(g)
    # validate first so errors carry the failing step
    for step, action in enumerate(actions):
        if not _is_applicable(action, state, g):
            raise InvalidAction(step, str(action))
        state = state.advance(action, g)
    if not state.done:
        raise IncompleteTree(f"{len(state.frontier)} open frontier symbol(s) after {len(actions)} actions")

    def build(symbol):
        action = actions[pos[0]]
        pos[0] += 1
        if action.kind == GEN:
            return action.token
        rule = g.rules_by_text[action.rule]
        holes = iter(g.holes(rule.template))
        return _fill(rule.template, g, lambda: build(next(holes)))

    return from_tree(build(g.start))


class _Deriver:
    """Recursive-descent matcher counting leftmost derivations (capped at 2)."""

    def __init__(self, g):
        self.g = g
        self.memo = {}

    def derive(self, symbol, node):
        key = (symbol, node.node_id)
        if key in self.memo:
            return self.memo[key]
        g = self.g
        found = []
        if symbol in g.leaf_vocab:
            if node.is_leaf and node.label in g.leaf_vocab[symbol]:
                found.append((Action.gen(symbol, node.label),))
        else:
            for rule in g.by_lhs.get(symbol, ()):
                for tail in self.match(rule.template, node):
                    found.append((Action.apply(rule),) + tail)
                    if len(found) > 1:
                        break
                if len(found) > 1:
                    break
        self.memo[key] = found
        return found

    def match(self, template, node):
        g = self.g
        if isinstance(template, str):
            if g.is_symbol(template):
                return self.derive(template, node)
            return [()] if node.is_leaf and node.label == template else []
        if node.is_leaf or node.label != template[0] or len(node.children) != len(template) - 1:
            return []
        partial = [()]
        for sub, child in zip(template[1:], node.children):
            options = self.match(sub, child)
            if not options:
                return []
            partial = [p + o for p in partial for o in options][:2]
        return partial


def lf_to_actions(lf, g):
    """Gold action sequence of ``lf`` under an unambiguous grammar."""
    if isinstance(lf, str):
        lf = parse_lf(lf)
    derivations = _Deriver(g).derive(g.start, lf.root)
    if not derivations:
        raise NotDerivable(f"{lf.text!r} is not derivable under grammar {g.name!r}")
    if len(derivations) > 1:
        raise AmbiguousDerivation(f"{lf.text!r} has more than one derivation under grammar {g.name!r}")
    return ActionSequence(derivations[0])


def action_set_of(dataset, g):
    """Union of gold actions over ``(utterance, lf)`` pairs."""
    out = set()
    for i, (_, lf) in enumerate(dataset):
        try:
            out.update(lf_to_actions(lf, g))
        except NotDerivable as exc:
            raise NotDerivable(str(exc), index=i) from None
    return out


def frontier_trace(seq, g):
    """Frontier top before each action of a gold sequence."""
    state = DerivationState.initial(g)
    tops = []
    for action in seq:
        tops.append(state.top)
        state = state.advance(action, g)
    return tops


class ActionRegistry:
    """Append-only map from actions to global ids."""

    def __init__(self, actions=()):
        self._ids = {}
        self._actions = []
        for a in actions:
            self.register(a)

    def register(self, action):
        aid = self._ids.get(action)
        if aid is None:
            aid = len(self._actions)
            self._ids[action] = aid
            self._actions.append(action)
        return aid

    def register_all(self, actions):
        return [self.register(a) for a in actions]

    def id(self, action):
        return self._ids[action]

    def __contains__(self, action):
        return action in self._ids

    def __getitem__(self, aid):
        return self._actions[aid]

    def __len__(self):
        return len(self._actions)

    def __iter__(self):
        return iter(self._actions)
