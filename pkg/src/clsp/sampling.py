"""Replay-memory samplers.

``dlfs`` clusters a task's training LFs with K-medoids under the distance
``1 - lf_similarity`` (one cluster per memory slot) and then picks one
instance per cluster so that the action distribution of the memory has
maximal entropy.  The baselines are ``random``, ``fss`` (k-means over
utterance encodings), ``lfs`` (the LF medoids) and ``balance`` (greedy
entropy without the cluster constraint).
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientPoints
from .grammar import lf_to_actions
from .logical_forms import lf_similarity, parse_lf

SUBSET_THRESHOLD = 300


@dataclass(frozen=True)
class MemoryEntry:
    utterance: str
    lf: object
    actions: tuple
    source_task: object = None
    cluster_id: int | None = None
    index: int = -1


@dataclass
class Memory:
    entries: list
    capacity: int
    task: object = None
    notes: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def histogram(self):
        return ActionHistogram.of(self.entries)

    def cluster_ids(self):
        return [e.cluster_id for e in self.entries]


class ActionHistogram:
    """Action frequencies over a set of entries, optionally restricted to a support."""

    def __init__(self, counts):
        self.counts = Counter({a: n for a, n in counts.items() if n})

    @classmethod
    def of(cls, entries, support=None):
        counts = Counter()
        for e in entries:
            counts.update(e.actions)
        if support is not None:
            support = set(support)
            counts = Counter({a: n for a, n in counts.items() if a in support})
        return cls(counts)

    def total(self):
        return sum(self.counts.values())

    def probabilities(self):
        n = self.total()
        return {a: c / n for a, c in self.counts.items()} if n else {}

    def entropy(self):
        return entropy_of_counts(np.fromiter(self.counts.values(), dtype=np.int64, count=len(self.counts)))


def entropies(totals):
    """Row-wise Shannon entropy (nats) of a 2-D integer count array.

    Rows are sorted before reduction so permutations of the same counts
    give bitwise identical values; ``0 log 0 = 0`` and an all-zero row
    has entropy 0.  Results are clamped at 0 so a single-action row is
    exactly 0 despite rounding.
    """
    t = np.sort(np.asarray(totals, dtype=np.float64), axis=1)
    n = t.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nlogn = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0).sum(axis=1)
        out = np.log(np.where(n > 0, n, 1.0)) - nlogn / np.where(n > 0, n, 1.0)
    return np.where(n > 0, np.maximum(out, 0.0), 0.0)


def entropy_of_counts(counts):
    return float(entropies(np.asarray(counts)[None, :])[0])


def memory_entropy(mem, support):
    entries = mem.entries if isinstance(mem, Memory) else mem
    return ActionHistogram.of(entries, support).entropy()


def make_entries(dataset, grammar, task=None):
    """Candidate entries with gold action sequences for ``(utterance, lf)`` pairs."""
    out = []
    for i, (utt, lf) in enumerate(dataset):
        lf = parse_lf(lf) if isinstance(lf, str) else lf
        out.append(MemoryEntry(utt, lf, tuple(lf_to_actions(lf, grammar)), task, None, i))
    return out


# ---------------------------------------------------------------------------
# distances and clustering


def lf_distance_matrix(lfs):
    """Pairwise ``1 - lf_similarity``; computed once per distinct LF text."""
    texts = [lf.text if hasattr(lf, "text") else str(lf) for lf in lfs]
    uniq = sorted(set(texts))
    pos = {t: i for i, t in enumerate(uniq)}
    u = len(uniq)
    D = np.zeros((u, u))
    for i in range(u):
        for j in range(i + 1, u):
            D[i, j] = D[j, i] = 1.0 - lf_similarity(uniq[i], uniq[j])
    idx = np.array([pos[t] for t in texts], dtype=np.int64)
    return D[np.ix_(idx, idx)]


@dataclass
class Clustering:
    assignment: np.ndarray
    medoids: list
    cost: float
    history: list

    def members(self, j):
        return [int(i) for i in np.flatnonzero(self.assignment == j)]


def _assign(D, medoids):
    sub = D[:, medoids]
    assignment = sub.argmin(axis=1)  # argmin keeps the lowest cluster index on ties
    for j, m in enumerate(medoids):
        assignment[m] = j
    cost = float(sub[np.arange(len(D)), assignment].sum())
    return assignment, cost


def kmedoids(lfs, k, seed=0, distances=None, max_iter=100):
    """PAM-style K-medoids with farthest-point initialisation.

    The first medoid is drawn from ``seed``; each further medoid is the
    non-medoid point farthest from its nearest medoid (lowest index on
    ties).  Iterations alternate nearest-medoid assignment and an
    in-cluster medoid update until the total cost stops improving.
    """
    n = len(lfs) if distances is None else len(distances)
    if k > n:
        raise InsufficientPoints(f"cannot form {k} clusters from {n} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    D = lf_distance_matrix(lfs) if distances is None else np.asarray(distances, dtype=float)
    rng = np.random.default_rng(seed)
    medoids = [int(rng.integers(n))]
    nearest = D[medoids[0]].copy()
    while len(medoids) < k:
        cand = nearest.copy()
        cand[medoids] = -np.inf
        nxt = int(np.argmax(cand))
        medoids.append(nxt)
        nearest = np.minimum(nearest, D[nxt])
    assignment, cost = _assign(D, medoids)
    history = [cost]
    for _ in range(max_iter):
        new_medoids = list(medoids)
        for j in range(k):
            members = np.flatnonzero(assignment == j)
            totals = D[np.ix_(members, members)].sum(axis=1)
            best = totals.min()
            inc = int(np.flatnonzero(members == medoids[j])[0])
            if totals[inc] > best:
                new_medoids[j] = int(members[np.flatnonzero(totals == best)[0]])
        new_assignment, new_cost = _assign(D, new_medoids)
        if new_cost >= cost:
            break
        medoids, assignment, cost = new_medoids, new_assignment, new_cost
        history.append(cost)
    return Clustering(assignment, medoids, cost, history)


# ---------------------------------------------------------------------------
# action subsets and entropy selection


def sample_action_subset(hist, h, seed=0):
    """Draw ``h`` actions without replacement, weighted by their frequency.

    ``hist`` is an :class:`ActionHistogram` or a mapping action -> count.
    Returns the full (nonzero-count) action set when ``h`` covers it.
    """
    counts = hist.counts if isinstance(hist, ActionHistogram) else hist
    actions = [a for a, n in counts.items() if n > 0]
    if h >= len(actions):
        return set(actions)
    weights = np.array([counts[a] for a in actions], dtype=float)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(actions), size=h, replace=False, p=weights / weights.sum())
    return {actions[i] for i in chosen}


def default_support(entries, h=None, seed=0):
    """Full action set, or a frequency-weighted subset when it is large."""
    hist = ActionHistogram.of(entries)
    if h is None:
        h = SUBSET_THRESHOLD if len(hist.counts) > SUBSET_THRESHOLD else len(hist.counts)
    return sample_action_subset(hist, h, seed)


def _count_matrix(entries, support):
    order = {a: i for i, a in enumerate(sorted(support, key=str))}
    mat = np.zeros((len(entries), len(order)), dtype=np.int64)
    for r, e in enumerate(entries):
        for a in e.actions:
            col = order.get(a)
            if col is not None:
                mat[r, col] += 1
    return mat


def _coordinate_ascent(counts, members, chosen, max_rounds):
    chosen = list(chosen)
    total = counts[chosen].sum(axis=0)
    for _ in range(max_rounds):
        changed = False
        for j, cand in enumerate(members):
            base = total - counts[chosen[j]]
            scores = entropies(base + counts[cand])
            inc = cand.index(chosen[j])
            best = int(np.argmax(scores))
            if scores[best] > scores[inc]:
                chosen[j] = cand[best]
                total = base + counts[chosen[j]]
                changed = True
        if not changed:
            break
    return entropy_of_counts(total), chosen


def _greedy_fill(counts, members, fixed=None):
    """Fill empty slots one at a time with the entropy-maximising (slot, instance)."""
    k = len(members)
    chosen = [None] * k
    total = np.zeros(counts.shape[1], dtype=np.int64)
    if fixed is not None:
        j, i = fixed
        chosen[j] = i
        total = total + counts[i]
    while any(c is None for c in chosen):
        pairs = [(j, i) for j in range(k) if chosen[j] is None for i in members[j]]
        scores = entropies(total + counts[[i for _, i in pairs]])
        j, i = pairs[int(np.argmax(scores))]
        chosen[j] = i
        total = total + counts[i]
    return chosen


def dlfs_select(entries, clustering, support=None, capacity=None, max_rounds=10, task=None, restarts=None):
    """One instance per cluster maximising the entropy of the memory's actions.

    Coordinate ascent: each round visits the clusters in index order and
    moves that slot to the member giving the highest entropy with the
    other slots fixed (the incumbent wins ties, then the lowest index);
    a round without change ends the climb.  The climb runs from the
    cluster medoids first, then from a greedy one-slot-at-a-time fill,
    then from greedy fills seeded with each (cluster, member) pair, up
    to ``restarts`` of those (default: all).  A later start replaces the
    current best only when strictly better.
    """
    k = len(clustering.medoids)
    capacity = k if capacity is None else capacity
    if k != capacity:
        raise ValueError(f"need one cluster per memory slot ({k} clusters for capacity {capacity})")
    support = default_support(entries) if support is None else set(support)
    counts = _count_matrix(entries, support)
    members = [clustering.members(j) for j in range(k)]
    best_h, best = _coordinate_ascent(counts, members, clustering.medoids, max_rounds)
    seeds = [None] + [(j, i) for j in range(k) for i in members[j]]
    if restarts is not None:
        seeds = seeds[: restarts + 1]
    for fixed in seeds:
        h, chosen = _coordinate_ascent(counts, members, _greedy_fill(counts, members, fixed), max_rounds)
        if h > best_h:
            best_h, best = h, chosen
    picked = [_with_cluster(entries[i], j) for j, i in enumerate(best)]
    return Memory(picked, capacity, task)


def brute_force_best_entropy(entries, clusters, support):
    """Exhaustive one-per-cluster optimum; ``clusters`` is a list of member index lists."""
    import itertools

    counts = _count_matrix(entries, support)
    best = -1.0
    for combo in itertools.product(*clusters):
        best = max(best, entropy_of_counts(counts[list(combo)].sum(axis=0)))
    return best


def _with_cluster(entry, cluster_id):
    return MemoryEntry(entry.utterance, entry.lf, entry.actions, entry.source_task, cluster_id, entry.index)


# ---------------------------------------------------------------------------
# samplers


def sample_random(entries, M, seed=0, task=None):
    n = len(entries)
    if M >= n:
        return Memory(list(entries), M, task)
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=M, replace=False)
    return Memory([entries[int(i)] for i in picked], M, task)


def kmeans(X, k, seed=0, max_iter=100):
    """Lloyd's algorithm from ``k`` distinct random points; returns (centroids, labels)."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k > n:
        raise InsufficientPoints(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=k, replace=False)].copy()
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            pts = X[labels == j]
            if len(pts):
                centroids[j] = pts.mean(axis=0)
    return centroids, labels


def sample_fss(entries, M, features, seed=0, task=None):
    """Instances nearest to k-means centroids of utterance features."""
    n = len(entries)
    if M > n:
        raise InsufficientPoints(f"cannot form {M} clusters from {n} points")
    X = np.asarray(features, dtype=float)
    centroids, labels = kmeans(X, M, seed)
    picked, seen = [], set()
    for j, ctr in enumerate(centroids):
        d2 = ((X - ctr) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        if i not in seen:
            seen.add(i)
            picked.append(_with_cluster(entries[i], j))
    return Memory(picked, M, task)


def sample_lfs(entries, M, seed=0, task=None, clustering=None):
    """The K-medoids medoids themselves."""
    clustering = clustering or kmedoids([e.lf for e in entries], M, seed)
    return Memory([_with_cluster(entries[m], j) for j, m in enumerate(clustering.medoids)], M, task)


def sample_balance(entries, M, seed=0, task=None, support=None):
    """Greedily add the instance that maximises memory entropy (lowest index on ties)."""
    support = default_support(entries) if support is None else set(support)
    counts = _count_matrix(entries, support)
    total = np.zeros(counts.shape[1], dtype=np.int64)
    remaining = list(range(len(entries)))
    picked = []
    while remaining and len(picked) < M:
        scores = entropies(total + counts[remaining])
        i = remaining.pop(int(np.argmax(scores)))
        picked.append(i)
        total = total + counts[i]
    return Memory([entries[i] for i in picked], M, task)


def sample_dlfs(entries, M, seed=0, task=None, support=None, max_rounds=10, clustering=None):
    clustering = clustering or kmedoids([e.lf for e in entries], M, seed)
    return dlfs_select(entries, clustering, support, M, max_rounds, task)


SAMPLERS = ("random", "fss", "lfs", "balance", "dlfs")


def select_memory(sampler, entries, M, seed=0, task=None, features=None):
    """Dispatch by sampler name; returns the whole set when ``M >= len(entries)``."""
    if M >= len(entries):
        mem = Memory([_with_cluster(e, j) for j, e in enumerate(entries)], M, task)
        if M > len(entries):
            mem.notes.append(f"capacity {M} exceeds {len(entries)} candidates; memory holds all of them")
        return mem
    if sampler == "random":
        return sample_random(entries, M, seed, task)
    if sampler == "fss":
        if features is None:
            raise ValueError("fss sampler needs utterance features")
        return sample_fss(entries, M, features() if callable(features) else features, seed, task)
    if sampler == "lfs":
        return sample_lfs(entries, M, seed, task)
    if sampler == "balance":
        return sample_balance(entries, M, seed, task)
    if sampler == "dlfs":
        return sample_dlfs(entries, M, seed, task)
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def save_memory(path, memory):
    with open(path, "w", encoding="utf-8") as fh:
        for e in memory.entries:
            rec = {"task": e.source_task, "utterance": e.utterance, "lf": str(e.lf), "cluster_id": e.cluster_id}
            fh.write(json.dumps(rec) + "\n")


def load_memory(path, grammars, capacity=None):
    """Reload a memory JSONL; ``grammars`` maps task -> Grammar for action replay."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            lf = parse_lf(rec["lf"])
            g = grammars[rec["task"]]
            entries.append(MemoryEntry(rec["utterance"], lf, tuple(lf_to_actions(lf, g)),
                                       rec["task"], rec.get("cluster_id"), i))
    return Memory(entries, capacity if capacity is not None else len(entries))
