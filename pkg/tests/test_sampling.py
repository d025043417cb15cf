import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clsp.errors import InsufficientPoints
from clsp.sampling import (ActionHistogram, Clustering, MemoryEntry, _coordinate_ascent, _count_matrix,
                           brute_force_best_entropy, default_support, dlfs_select, entropies, entropy_of_counts,
                           kmedoids, lf_distance_matrix, load_memory, make_entries, memory_entropy,
                           sample_action_subset, sample_balance, sample_fss, sample_lfs, sample_random,
                           save_memory, select_memory)


def entry(i, actions, lf="(f x)"):
    return MemoryEntry(f"u{i}", lf, tuple(actions), "t", None, i)


def clustering_of(groups):
    n = sum(len(g) for g in groups)
    assignment = np.empty(n, dtype=np.int64)
    for j, g in enumerate(groups):
        assignment[g] = j
    return Clustering(assignment, [g[0] for g in groups], 0.0, [0.0])


def random_instance(rng, max_clusters=8, max_members=5, n_actions=6):
    k = int(rng.integers(1, max_clusters + 1))
    sizes = rng.integers(1, max_members + 1, size=k)
    groups, entries, i = [], [], 0
    for s in sizes:
        groups.append(list(range(i, i + s)))
        for _ in range(s):
            length = int(rng.integers(1, 6))
            entries.append(entry(i, [f"a{int(x)}" for x in rng.integers(0, n_actions, size=length)]))
            i += 1
    return entries, groups


# -- entropy -------------------------------------------------------------------


def test_entropy_examples():
    assert entropy_of_counts([3, 3, 3, 3]) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy_of_counts([7]) == 0.0
    assert entropy_of_counts([0, 5, 0]) == 0.0
    assert entropy_of_counts([2, 2, 4]) == pytest.approx(-(0.25 * math.log(0.25) * 2 + 0.5 * math.log(0.5)), abs=1e-12)
    assert entropy_of_counts([2, 2, 4]) == pytest.approx(1.0397207708, abs=1e-9)
    assert memory_entropy([], {"a"}) == 0.0


def test_memory_entropy_restricted_to_support():
    mem = [entry(0, ["a", "a", "b", "c"])]
    assert memory_entropy(mem, {"a", "b"}) == pytest.approx(entropy_of_counts([2, 1]))


@given(st.lists(st.integers(0, 50), min_size=1, max_size=12), st.randoms())
def test_entropy_permutation_invariant(counts, rnd):
    shuffled = list(counts)
    rnd.shuffle(shuffled)
    assert entropy_of_counts(counts) == entropy_of_counts(shuffled)
    assert 0.0 <= entropy_of_counts(counts) <= math.log(len(counts)) + 1e-12


@given(st.lists(st.lists(st.integers(0, 9), min_size=4, max_size=4), min_size=1, max_size=6))
def test_batched_entropy_matches_scalar(rows):
    batch = entropies(np.array(rows))
    for r, h in zip(rows, batch):
        p = np.array([c for c in r if c]) / max(sum(r), 1)
        assert h == pytest.approx(float(-(p * np.log(p)).sum()) if sum(r) else 0.0, abs=1e-12)


# -- action subsets -------------------------------------------------------------


def test_action_subset_full_when_h_large():
    hist = ActionHistogram({"a": 3, "b": 1, "c": 0})
    assert sample_action_subset(hist, 5) == {"a", "b"}
    assert sample_action_subset(hist, 2) == {"a", "b"}


def test_action_subset_frequency_weighted():
    hist = {"a": 3, "b": 1, "z": 0}
    hits = sum(sample_action_subset(hist, 1, seed=s) == {"a"} for s in range(10_000))
    assert abs(hits / 10_000 - 0.75) <= 0.02
    assert all("z" not in sample_action_subset(hist, 2, seed=s) for s in range(200))


def test_action_subset_deterministic():
    hist = {f"a{i}": i + 1 for i in range(20)}
    assert sample_action_subset(hist, 5, seed=3) == sample_action_subset(hist, 5, seed=3)


# -- k-medoids ------------------------------------------------------------------

LFS = ["(f a)", "(f b)", "(g (h a))", "(g (h b))", "(k a b)", "(k b a)",
       "(f (h a))", "(g a)", "(k (h a) b)", "(f a b)", "(g (k a) b)", "(h a)"]


def test_kmedoids_k_equals_n():
    c = kmedoids(LFS[:5], 5)
    assert sorted(c.medoids) == list(range(5)) and c.cost == 0.0


def test_kmedoids_identical_groups():
    lfs = ["(f a)"] * 3 + ["(g (h b) c)"] * 4
    c = kmedoids(lfs, 2, seed=1)
    assert len(set(c.assignment[:3])) == 1 and len(set(c.assignment[3:])) == 1
    assert c.assignment[0] != c.assignment[3] and c.cost == 0.0


def test_kmedoids_against_exhaustive_medoids():
    D = lf_distance_matrix(LFS)
    c = kmedoids(LFS, 3, seed=0, distances=D)
    # nearest-medoid consistency
    for i, j in enumerate(c.assignment):
        assert D[i, c.medoids[j]] == D[i, c.medoids].min()
    # never better than the exhaustive optimum over medoid triples
    best = min(D[:, list(m)].min(axis=1).sum() for m in itertools.combinations(range(len(LFS)), 3))
    assert c.cost >= best - 1e-12
    # and no worse than a random assignment to the same medoids
    rng = np.random.default_rng(0)
    for _ in range(20):
        rand = rng.integers(0, 3, size=len(LFS))
        assert c.cost <= D[np.arange(len(LFS)), np.array(c.medoids)[rand]].sum() + 1e-12
    assert all(b <= a for a, b in zip(c.history, c.history[1:]))


def test_kmedoids_insufficient_points():
    with pytest.raises(InsufficientPoints):
        kmedoids(LFS[:2], 3)


def test_distance_matrix_symmetric():
    D = lf_distance_matrix(LFS)
    assert np.array_equal(D, D.T) and np.all(np.diag(D) == 0)


# -- DLFS -----------------------------------------------------------------------


def test_dlfs_constant_objective_keeps_medoids():
    entries = [entry(i, ["a", "b"]) for i in range(6)]
    groups = [[1, 0, 2], [4, 3, 5]]
    mem = dlfs_select(entries, clustering_of(groups))
    assert [e.index for e in mem] == [1, 4]


def test_dlfs_single_slot():
    entries = [entry(0, ["a", "a"]), entry(1, ["a", "b", "c"]), entry(2, ["a", "b"])]
    mem = dlfs_select(entries, clustering_of([[0, 1, 2]]))
    assert [e.index for e in mem] == [1]


def test_dlfs_differs_from_lfs_when_swap_helps():
    # medoids both use only "a"; swapping slot 1 to its "b" member raises entropy
    entries = [entry(0, ["a"]), entry(1, ["a"]), entry(2, ["a"]), entry(3, ["b"])]
    cl = clustering_of([[0, 1], [2, 3]])
    lfs = sample_lfs(entries, 2, clustering=cl)
    dl = dlfs_select(entries, cl)
    assert [e.index for e in lfs] == [0, 2]
    assert [e.index for e in dl] == [0, 3]
    # and agrees with it when no swap helps
    flat = [entry(i, ["a", "b"]) for i in range(4)]
    assert [e.index for e in dlfs_select(flat, cl)] == [e.index for e in sample_lfs(flat, 2, clustering=cl)]


def test_dlfs_rejects_mismatched_capacity():
    entries = [entry(i, ["a"]) for i in range(4)]
    with pytest.raises(ValueError):
        dlfs_select(entries, clustering_of([[0, 1], [2, 3]]), capacity=3)


@given(st.integers(0, 2**32 - 1))
def test_dlfs_constraint_ceiling_and_dominance(seed):
    entries, groups = random_instance(np.random.default_rng(seed))
    cl = clustering_of(groups)
    support = default_support(entries)
    mem = dlfs_select(entries, cl, support)
    ids = mem.cluster_ids()
    assert len(set(ids)) == len(ids) == len(groups)
    assert all(e.index in groups[j] for e, j in zip(mem, ids))
    h = memory_entropy(mem, support)
    assert h <= brute_force_best_entropy(entries, groups, support) + 1e-12
    assert h >= memory_entropy(sample_lfs(entries, len(groups), clustering=cl), support) - 1e-12


@given(st.integers(0, 2**32 - 1))
def test_incremental_entropy_matches_recomputation(seed):
    entries, groups = random_instance(np.random.default_rng(seed))
    support = default_support(entries)
    counts = _count_matrix(entries, support)
    h, chosen = _coordinate_ascent(counts, groups, [g[0] for g in groups], 10)
    assert abs(h - memory_entropy([entries[i] for i in chosen], support)) <= 1e-12


# -- baseline samplers ------------------------------------------------------------


def test_random_sampler():
    entries = [entry(i, ["a"]) for i in range(20)]
    assert len(sample_random(entries, 25)) == 20
    a = [e.index for e in sample_random(entries, 5, seed=2)]
    assert a == [e.index for e in sample_random(entries, 5, seed=2)]
    assert len(set(a)) == 5


def test_fss_nearest_to_centroid():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0, 0.1, (5, 2)), rng.normal(5, 0.1, (5, 2))])
    entries = [entry(i, ["a"]) for i in range(10)]
    mem = sample_fss(entries, 2, X, seed=1)
    assert sorted(e.index < 5 for e in mem) == [False, True]
    assert len(sample_fss(entries, 10, X)) == 10
    same = sample_fss(entries[:4], 2, np.zeros((4, 2)))
    assert [e.index for e in same] == [0]
    with pytest.raises(InsufficientPoints):
        sample_fss(entries[:2], 3, X[:2])


def test_balance_sampler():
    entries = [entry(0, ["a", "a"]), entry(1, ["a", "b"]), entry(2, ["c", "c"]), entry(3, ["b", "c"])]
    assert [e.index for e in sample_balance(entries, 1)] == [1]
    mem = sample_balance(entries, 2)
    assert [e.index for e in mem] == [1, 2]
    assert len(sample_balance(entries, 10)) == 4


def test_select_memory_full_set_with_note():
    entries = [entry(i, ["a"]) for i in range(3)]
    mem = select_memory("dlfs", entries, 5)
    assert len(mem) == 3 and mem.notes
    with pytest.raises(ValueError):
        select_memory("gss", [entry(i, ["a"]) for i in range(9)], 2)


def test_samplers_deterministic(geo_grammar):
    data = [(f"u{i}", lf) for i, lf in enumerate(
        ["(count city)", "(count river)", "(largest lake)", "(top 2 city)", "(count (loc city lake))",
         "(largest (next_to river))", "(top 3 (loc state city))", "(count (next_to lake))", "(largest state)"])]
    entries = make_entries(data, geo_grammar, "geo")
    for name in ("random", "lfs", "balance", "dlfs"):
        a = select_memory(name, entries, 3, seed=4, task="geo")
        b = select_memory(name, entries, 3, seed=4, task="geo")
        assert [e.index for e in a] == [e.index for e in b]


def test_memory_round_trip(tmp_path, geo_grammar):
    data = [("a", "(count city)"), ("b", "(largest (next_to river))")]
    mem = select_memory("random", make_entries(data, geo_grammar, "geo"), 1, seed=0, task="geo")
    save_memory(tmp_path / "m.jsonl", mem)
    back = load_memory(tmp_path / "m.jsonl", {"geo": geo_grammar})
    assert [(e.utterance, str(e.lf), e.actions) for e in back] == [(e.utterance, str(e.lf), e.actions) for e in mem]
