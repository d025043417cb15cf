"""S-expression logical forms, their relation triples and Smatch similarity.

A logical form such as ``(largest (river_in texas))`` is read head-first:
the first atom of a list labels the node, the remaining items are its
children.  Similarity between two forms is computed over triples

    (node, "instance", label)        one per node
    (parent, "arg<k>", child)        one per edge, k = child ordinal

and the best one-to-one node alignment between the two trees.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

from .errors import MalformedLf

EXACT_NODE_LIMIT = 8
DEFAULT_RESTARTS = 4


@dataclass(frozen=True)
class AstNode:
    label: str
    children: tuple["AstNode", ...] = ()
    node_id: int = 0

    @property
    def is_leaf(self):
        return not self.children

    def preorder(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def to_text(self):
        if not self.children:
            return self.label
        return "(" + " ".join([self.label] + [c.to_text() for c in self.children]) + ")"


@dataclass(frozen=True)
class LogicalForm:
    text: str
    root: AstNode = field(compare=False, repr=False)

    @property
    def size(self):
        return sum(1 for _ in self.root.preorder())

    def __str__(self):
        return self.text


def _tokenize(text):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def parse_sexpr(text):
    """Parse into nested lists of atoms; returns the single top-level item."""
    tokens = _tokenize(text)
    if not tokens:
        raise MalformedLf("empty expression", 0)
    stack = [[]]
    opened = []
    for tok, pos in tokens:
        if tok == "(":
            stack.append([])
            opened.append(pos)
        elif tok == ")":
            if len(stack) == 1:
                raise MalformedLf("unbalanced ')'", pos)
            items = stack.pop()
            start = opened.pop()
            if not items:
                raise MalformedLf("empty list", start)
            stack[-1].append(items)
        else:
            stack[-1].append(tok)
    if len(stack) > 1:
        raise MalformedLf("unbalanced '('", opened[-1])
    top = stack[0]
    if len(top) != 1:
        raise MalformedLf("expected exactly one expression", tokens[0][1] if not top else len(text))
    return top[0]


def _build(item, counter, text):
    node_id = counter[0]
    counter[0] += 1
    if isinstance(item, str):
        return AstNode(item, (), node_id)
    head = item[0]
    if not isinstance(head, str):
        raise MalformedLf("list head must be an atom", 0)
    if len(item) == 1:
        raise MalformedLf(f"list '({head})' has no arguments", text.find("(" + head))
    children = tuple(_build(child, counter, text) for child in item[1:])
    return AstNode(head, children, node_id)


def parse_lf(text):
    """Parse an s-expression string into a :class:`LogicalForm`.

    Raises :class:`MalformedLf` on unbalanced parentheses, empty input,
    empty lists and lists with a head but no arguments.
    """
    tree = parse_sexpr(text)
    root = _build(tree, [0], text)
    return LogicalForm(root.to_text(), root)


def from_tree(tree):
    """Build a LogicalForm from nested lists/tuples of atoms."""
    root = _build(tree, [0], "")
    return LogicalForm(root.to_text(), root)


def canonicalize(text):
    return parse_lf(text).text


def _as_lf(lf):
    return parse_lf(lf) if isinstance(lf, str) else lf


@dataclass(frozen=True)
class TripleSet:
    instance_triples: frozenset
    relation_triples: frozenset

    def __len__(self):
        return len(self.instance_triples) + len(self.relation_triples)


def extract_triples(lf):
    lf = _as_lf(lf)
    instances, relations = set(), set()
    for node in lf.root.preorder():
        instances.add((node.node_id, "instance", node.label))
        for k, child in enumerate(node.children):
            relations.add((node.node_id, f"arg{k}", child.node_id))
    return TripleSet(frozenset(instances), frozenset(relations))


class _Tree:
    """Flat view of an AST used by the matchers."""

    __slots__ = ("labels", "parent", "slot", "edges", "children", "n")

    def __init__(self, lf):
        nodes = sorted(lf.root.preorder(), key=lambda nd: nd.node_id)
        self.n = len(nodes)
        self.labels = [nd.label for nd in nodes]
        self.parent = [-1] * self.n
        self.slot = [-1] * self.n
        self.edges = {}
        self.children = [[c.node_id for c in nd.children] for nd in nodes]
        for nd in nodes:
            for k, child in enumerate(nd.children):
                self.parent[child.node_id] = nd.node_id
                self.slot[child.node_id] = k
                self.edges[(nd.node_id, child.node_id)] = k

    @property
    def num_triples(self):
        return 2 * self.n - 1


def _match_count(a, b, mapping):
    """Matched triples of ``a`` under partial injective ``mapping`` a -> b (None = unmapped)."""
    total = 0
    for u in range(a.n):
        v = mapping[u]
        if v is None:
            continue
        if a.labels[u] == b.labels[v]:
            total += 1
        p = a.parent[u]
        if p >= 0:
            mp = mapping[p]
            if mp is not None and b.edges.get((mp, v)) == a.slot[u]:
                total += 1
    return total


def _exact_match_count(a, b):
    """Best number of matched triples over all injective node alignments.

    The count is symmetric in (a, b), so the smaller tree is mapped
    completely into the larger one; extending a partial alignment never
    loses matches, which keeps the search exact.  Depth-first search in
    preorder with an optimistic bound of two matches per remaining node.
    """
    if a.n > b.n:
        a, b = b, a
    best = [0]
    used = [False] * b.n
    mapping = [None] * a.n
    limit = a.num_triples

    def dfs(u, score):
        if score + 2 * (a.n - u) <= best[0]:
            return
        if u == a.n:
            best[0] = score
            return
        p = a.parent[u]
        mp = mapping[p] if p >= 0 else None
        for v in range(b.n):
            if used[v]:
                continue
            gain = 1 if a.labels[u] == b.labels[v] else 0
            if mp is not None and b.edges.get((mp, v)) == a.slot[u]:
                gain += 1
            used[v] = True
            mapping[u] = v
            dfs(u + 1, score + gain)
            used[v] = False
            mapping[u] = None
            if best[0] == limit:
                return

    dfs(0, 0)
    return best[0]


def _greedy_init(a, b):
    mapping = [None] * a.n
    used = set()
    for u in range(a.n):
        for v in range(b.n):
            if v not in used and a.labels[u] == b.labels[v]:
                mapping[u] = v
                used.add(v)
                break
    return mapping


def _anchored_init(a, b, u0, v0):
    """Align the subtree of ``a`` at ``u0`` onto ``b`` at ``v0`` by slot path,
    then map leftover nodes greedily by label."""
    mapping = [None] * a.n
    used = set()
    stack = [(u0, v0)]
    while stack:
        u, v = stack.pop()
        mapping[u] = v
        used.add(v)
        by_slot = {b.slot[c]: c for c in b.children[v]}
        for c in a.children[u]:
            if a.slot[c] in by_slot:
                stack.append((c, by_slot[a.slot[c]]))
    for u in range(a.n):
        if mapping[u] is None:
            for v in range(b.n):
                if v not in used and a.labels[u] == b.labels[v]:
                    mapping[u] = v
                    used.add(v)
                    break
    return mapping


def _hill_climb(a, b, mapping):
    """Steepest-ascent over reassign / swap moves until no move improves."""
    mapping = list(mapping)
    score = _match_count(a, b, mapping)
    while True:
        best_gain, best_move = 0, None
        used = {v for v in mapping if v is not None}
        free = [v for v in range(b.n) if v not in used] + [None]
        for u in range(a.n):
            old = mapping[u]
            for v in free:
                if v == old:
                    continue
                mapping[u] = v
                gain = _match_count(a, b, mapping) - score
                if gain > best_gain:
                    best_gain, best_move = gain, ("set", u, v)
            mapping[u] = old
        for u, w in itertools.combinations(range(a.n), 2):
            if mapping[u] == mapping[w]:
                continue
            mapping[u], mapping[w] = mapping[w], mapping[u]
            gain = _match_count(a, b, mapping) - score
            if gain > best_gain:
                best_gain, best_move = gain, ("swap", u, w)
            mapping[u], mapping[w] = mapping[w], mapping[u]
        if best_move is None:
            return score
        kind, u, x = best_move
        if kind == "set":
            mapping[u] = x
        else:
            mapping[u], mapping[x] = mapping[x], mapping[u]
        score += best_gain


def _hill_match_count(a, b, restarts):
    """Hill-climb from ``restarts`` starting points.

    The first start is the greedy label match; the others are the
    highest-scoring anchored subtree alignments over all node pairs
    (ties broken by node ids), so the search is deterministic.
    """
    starts = [_greedy_init(a, b)]
    if restarts > 1:
        ranked = []
        for u in range(a.n):
            for v in range(b.n):
                m = _anchored_init(a, b, u, v)
                ranked.append((-_match_count(a, b, m), u, v, m))
        ranked.sort(key=lambda item: item[:3])
        starts.extend(item[3] for item in ranked[: restarts - 1])
    limit = min(a.num_triples, b.num_triples)
    best = 0
    for mapping in starts:
        best = max(best, _hill_climb(a, b, mapping))
        if best == limit:
            break
    return best


def best_match_count(src, dst, method="auto", restarts=DEFAULT_RESTARTS):
    """Number of triples matched by the best alignment found.

    ``method`` is ``"exact"``, ``"hill"`` or ``"auto"`` (exact when both
    trees have at most :data:`EXACT_NODE_LIMIT` nodes).
    """
    a, b = _tree_of(_text_of(src)), _tree_of(_text_of(dst))
    if method == "auto":
        method = "exact" if max(a.n, b.n) <= EXACT_NODE_LIMIT else "hill"
    if method == "exact":
        # the exact count is symmetric, so one cache entry serves both directions
        x, y = sorted((_text_of(src), _text_of(dst)))
        return _cached_match_count(x, y, method, 0)
    if method == "hill":
        return _cached_match_count(_text_of(src), _text_of(dst), method, restarts)
    raise ValueError(f"unknown matching method {method!r}")


def _text_of(lf):
    return lf.text if isinstance(lf, LogicalForm) else _canonical(lf)


@functools.lru_cache(maxsize=100_000)
def _canonical(text):
    return parse_lf(text).text


@functools.lru_cache(maxsize=100_000)
def _tree_of(text):
    return _Tree(parse_lf(text))


@functools.lru_cache(maxsize=200_000)
def _cached_match_count(src_text, dst_text, method, restarts):
    a, b = _tree_of(src_text), _tree_of(dst_text)
    if method == "exact":
        return _exact_match_count(a, b)
    return _hill_match_count(a, b, restarts)


def smatch_directed(src, dst, method="auto", restarts=DEFAULT_RESTARTS):
    """Fraction of ``src`` triples matched in ``dst`` under the best alignment."""
    matched = best_match_count(src, dst, method, restarts)
    return matched / _tree_of(_text_of(src)).num_triples


def lf_similarity(y_i, y_j, method="auto", restarts=DEFAULT_RESTARTS):
    """Symmetric similarity: mean of the two directed Smatch scores."""
    forward = smatch_directed(y_i, y_j, method, restarts)
    backward = smatch_directed(y_j, y_i, method, restarts)
    return 0.5 * (forward + backward)


def lf_distance(y_i, y_j, **kwargs):
    return 1.0 - lf_similarity(y_i, y_j, **kwargs)
