"""Independent oracles and small builders shared by the unit and acceptance tests."""
import itertools

import numpy as np

from clsp.logical_forms import extract_triples, from_tree
from clsp.model import SHARED, ActionScope, Parser, ParserConfig, ParserParams, encode_example, task_tag

TOY_DATA = [
    ("how many cities", "(count city)"),
    ("largest river", "(largest river)"),
    ("top 2 lakes next to city", "(top 2 (next_to city))"),
    ("count state in river lake", "(count (loc river lake))"),
]


def random_tree(rng, n_nodes, labels):
    """LogicalForm with ``n_nodes`` nodes; parents are drawn uniformly among earlier nodes."""
    children = [[] for _ in range(n_nodes)]
    for i in range(1, n_nodes):
        children[int(rng.integers(i))].append(i)
    names = [labels[int(rng.integers(len(labels)))] for _ in range(n_nodes)]

    def build(i):
        return names[i] if not children[i] else [names[i]] + [build(c) for c in children[i]]

    return from_tree(build(0))


def brute_force_matches(x, y):
    """Best matched-triple count over every injective node map, vectorised over permutations.

    Uses only ``extract_triples``, not the library matcher.  The count is
    symmetric in its arguments, so the smaller tree is mapped into the
    larger one.
    """
    tx, ty = extract_triples(x), extract_triples(y)
    if len(tx.instance_triples) > len(ty.instance_triples):
        tx, ty = ty, tx
    na, nb = len(tx.instance_triples), len(ty.instance_triples)
    la = [lab for _, _, lab in sorted(tx.instance_triples)]
    lb = [lab for _, _, lab in sorted(ty.instance_triples)]
    perms = np.array(list(itertools.permutations(range(nb), na)), dtype=np.int64)
    lab_eq = np.array([[a == b for b in lb] for a in la])
    score = lab_eq[np.arange(na)[None, :], perms].sum(axis=1)
    edge = {}
    for p, slot, c in ty.relation_triples:
        edge.setdefault(slot, np.zeros((nb, nb), dtype=bool))[p, c] = True
    for p, slot, c in tx.relation_triples:
        if slot in edge:
            score = score + edge[slot][perms[:, p], perms[:, c]]
    return int(score.max())


def brute_force_similarity(x, y):
    m = brute_force_matches(x, y)
    return 0.5 * (m / len(extract_triples(x)) + m / len(extract_triples(y)))


def best_one_per_cluster_entropy(count_rows, groups):
    """Exhaustive max entropy over one row per group (numpy product expansion)."""
    totals = np.zeros((1, count_rows.shape[1]))
    for g in groups:
        totals = (totals[:, None, :] + count_rows[g][None, :, :]).reshape(-1, count_rows.shape[1])
    n = totals.sum(axis=1, keepdims=True)
    p = np.divide(totals, n, out=np.zeros_like(totals), where=n > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
    return float(h.max())


def build_toy_parser(grammar, data=TOY_DATA, dar=False, d=8, seed=0, task="geo", shared_every=2, init_scale=0.1):
    cfg = ParserConfig(word_emb_dim=6, hidden_dim=d, action_emb_dim=5, dar_enabled=dar, rng_seed=seed,
                       init_scale=init_scale)
    params = ParserParams(cfg)
    params.add_words(w for u, _ in data for w in u.split())
    acts = grammar.actions()
    params.add_actions(acts, [SHARED if i % shared_every == 0 else task_tag(task) for i in range(len(acts))])
    params.add_task(task)
    parser = Parser(params)
    scope = ActionScope(grammar, params)
    batch = [encode_example(u, lf, grammar, params, task) for u, lf in data]
    return parser, scope, batch


def used_coordinates(params, batch):
    """(tensor, flat index) pairs that can influence the loss."""
    coords = []
    words = {w for ex in batch for w in params.word_ids(ex.tokens)}
    for name, t in sorted(params.tensors.items()):
        if name == "word_emb":
            rows = sorted(words)
        elif name == "action_emb":
            rows = range(t.shape[0])
        else:
            coords.extend((name, i) for i in range(t.size))
            continue
        width = t.shape[1]
        coords.extend((name, r * width + j) for r in rows for j in range(width))
    return coords


def finite_difference_errors(parser, scope, batch, coords, h=1e-5):
    """Relative error |analytic - numeric| / (|analytic| + |numeric|) per coordinate."""
    P = parser.params.tensors
    _, grads = parser.loss_and_grad(batch, scope)
    errors = []
    for name, idx in coords:
        flat = P[name].reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        up = parser.loss_and_grad(batch, scope, need_grad=False)[0]
        flat[idx] = old - h
        down = parser.loss_and_grad(batch, scope, need_grad=False)[0]
        flat[idx] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        errors.append(abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-12))
    return np.array(errors)
