import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clsp.errors import EmptyUtterance, ParseTimeout
from clsp.grammar import Grammar, lf_to_actions
from clsp.model import (SHARED, ActionScope, Adam, Parser, ParserConfig, _masked_softmax, apply_mask, encode_example,
                        load_checkpoint, save_checkpoint, task_tag)
from helpers import TOY_DATA, build_toy_parser, finite_difference_errors, used_coordinates

DATA = TOY_DATA
build = build_toy_parser


@pytest.mark.parametrize("dar", [False, True])
def test_gradient_matches_finite_differences(geo_grammar, dar):
    # unit-scale weights keep every gradient well above finite-difference rounding noise
    parser, scope, batch = build(geo_grammar, dar=dar, init_scale=1.0)
    coords = used_coordinates(parser.params, batch)
    rng = np.random.default_rng(11)
    picked = [coords[i] for i in rng.choice(len(coords), size=60, replace=False)]
    if dar:
        picked += [("dar_phi/geo", 3), ("dar_gate/geo", 7)]
    worst = finite_difference_errors(parser, scope, batch, picked).max()
    assert worst <= 1e-4


def test_dar_parameter_count(geo_grammar):
    for d in (4, 8, 16):
        parser, _, _ = build(geo_grammar, dar=True, d=d)
        assert parser.params.dar_param_count("geo") == 3 * d * d
    parser, _, _ = build(geo_grammar, dar=False)
    assert parser.params.dar_param_count("geo") == 0


def test_dar_zero_gate_is_identity(geo_grammar):
    parser, _, _ = build(geo_grammar, dar=True)
    h = np.random.default_rng(0).normal(size=(3, 8))
    hh, _ = parser._adapt(h, ["geo"] * 3, gate_override=-np.inf)
    assert np.array_equal(hh, h)


def test_encode_shapes(geo_grammar):
    parser, _, _ = build(geo_grammar)
    E = parser.encode(("how", "many", "cities"))
    assert E.shape == (3, 8) and np.all(np.isfinite(E))
    with pytest.raises(EmptyUtterance):
        parser.encode(())


def test_zero_weights_give_constant_outputs(geo_grammar):
    parser, _, _ = build(geo_grammar)
    for t in parser.params.tensors.values():
        t[...] = 0.0
    E = parser.encode(("how", "many", "cities"))
    assert np.array_equal(E, np.zeros_like(E))


def test_encoder_is_order_sensitive(geo_grammar):
    parser, _, _ = build(geo_grammar)
    fwd = parser.encode(("how", "many", "cities"))
    rev = parser.encode(("cities", "many", "how"))
    assert not np.allclose(fwd, rev[::-1])


def test_singleton_steps_have_probability_one(count_grammar):
    parser, scope, batch = build(count_grammar, data=[("how many cities", "(count city)")], task="count")
    probs = parser.step_probs(batch, scope)[0]
    assert probs[0] == 1.0 and probs[1] == 1.0
    assert 0.0 < probs[2] < 1.0


def test_equal_embeddings_give_uniform_distribution(count_grammar):
    parser, scope, batch = build(count_grammar, data=[("how many cities", "(count city)")], task="count")
    parser.params.tensors["action_emb"][:] = parser.params.tensors["action_emb"][0]
    probs = parser.step_probs(batch, scope)[0]
    assert probs[2] == pytest.approx(1 / 3, abs=1e-12)


def test_nll_zero_when_every_step_is_forced():
    g = Grammar.from_text("start Q\nslot e : x\nQ -> (f e)\n")
    parser, scope, batch = build(g, data=[("f of x", "(f x)")], task="t")
    assert parser.sequence_nll(batch[0], scope) == 0.0


def test_nll_of_uniform_two_step_sequence():
    g = Grammar.from_text("start Q\nslot e : x y\nQ -> (f e)\nQ -> (g e)\nQ -> (h e)\n")
    parser, scope, batch = build(g, data=[("g of y", "(g y)")], task="t")
    parser.params.tensors["action_emb"][:] = 0.0
    assert parser.sequence_nll(batch[0], scope) == pytest.approx(math.log(3) + math.log(2), abs=1e-12)


@given(st.integers(0, 10_000))
def test_nll_nonnegative(seed):
    from conftest import GEO_GRAMMAR

    parser, scope, batch = build(Grammar.from_text(GEO_GRAMMAR), seed=seed)
    for ex in batch:
        assert parser.sequence_nll(ex, scope) >= 0.0


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_masked_softmax_sums_to_one(n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(scale=5, size=(4, n))
    mask = rng.random((4, n)) < 0.6
    mask[:, 0] = True
    p = _masked_softmax(scores, mask)
    assert np.all(p >= 0) and np.all(p[~mask] == 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_gradient_mask_support(geo_grammar):
    parser, scope, batch = build(geo_grammar)
    rows = [0, 3]
    _, grads = parser.gradient(batch, scope, mask=parser.params.action_row_mask(rows))
    for name, g in grads.items():
        if name == "action_emb":
            assert not np.any(np.delete(g, rows, axis=0))
            assert np.any(g[rows])
        else:
            assert not np.any(g)


def test_gradient_step_decreases_loss(geo_grammar):
    parser, scope, batch = build(geo_grammar)
    loss, grads = parser.loss_and_grad(batch, scope)
    for name, g in grads.items():
        parser.params.tensors[name] -= 1e-3 * g
    assert parser.loss_and_grad(batch, scope, need_grad=False)[0] < loss


def train(parser, scope, batch, steps, lr=0.05):
    opt = Adam()
    mask = parser.params.mask_for(parser.params.all_tags())
    for _ in range(steps):
        _, grads = parser.loss_and_grad(batch, scope)
        opt.step(parser.params.tensors, grads, mask, lr)
    return opt


def test_overfit_single_example(geo_grammar):
    data = [("top 2 lakes next to city", "(top 2 (next_to city))")]
    parser, scope, batch = build(geo_grammar, data=data)
    train(parser, scope, batch, 60)
    assert parser.parse(data[0][0], "geo", scope).text == data[0][1]
    assert parser.parse(data[0][0], "geo", scope, beam=3).text == data[0][1]


def test_forced_grammar_output_independent_of_params():
    g = Grammar.from_text("start Q\nslot e : x\nQ -> (f (g e))\n")
    outs = set()
    for seed in range(3):
        parser, scope, _ = build(g, data=[("f of x", "(f (g x))")], task="t", seed=seed)
        outs.add(parser.parse("anything here", "t", scope).text)
    assert outs == {"(f (g x))"}


@given(st.integers(0, 10_000))
def test_beam_dominates_greedy(seed):
    from conftest import GEO_GRAMMAR

    g = Grammar.from_text(GEO_GRAMMAR)
    parser, scope, _ = build(g, seed=seed)
    tokens = ("top", "2", "lakes")
    greedy = parser.greedy_decode([tokens], ["geo"], scope, max_steps=40)[0]
    ids, lp = parser.beam_decode(tokens, "geo", scope, width=4, max_steps=40)
    if greedy is not None:
        assert lp >= parser.sequence_logprob(tokens, "geo", greedy, scope) - 1e-9


def test_parse_timeout(geo_grammar):
    parser, scope, _ = build(geo_grammar)
    with pytest.raises(ParseTimeout):
        parser.parse("largest river", "geo", scope, max_steps=1)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.arange(4.0)}
    Adam().step(p, {"w": np.zeros(4)}, {"w": None}, 0.1)
    assert np.array_equal(p["w"], np.arange(4.0))


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = {"w": np.zeros(3)}
    opt = Adam()
    g = np.array([2.0, -0.5, 1e-3])
    for _ in range(200):
        before = p["w"].copy()
        opt.step(p, {"w": g}, {"w": None}, 0.01)
    assert np.allclose(p["w"] - before, -0.01 * np.sign(g), rtol=1e-3)


def test_adam_masked_rows_do_not_move_or_touch_state():
    p = {"w": np.ones((3, 2)), "b": np.ones(2)}
    opt = Adam()
    opt.step(p, {"w": np.ones((3, 2)), "b": np.ones(2)}, {"w": np.array([1])}, 0.1)
    assert np.array_equal(p["w"][[0, 2]], np.ones((2, 2))) and np.array_equal(p["b"], np.ones(2))
    assert not np.any(p["w"][1] == 1.0)
    m, v, t = opt.state["w"]
    assert np.array_equal(t[[0, 2]], np.zeros((2, 2))) and "b" not in opt.state


def test_partition_tags_cover_every_scalar(geo_grammar):
    parser, _, _ = build(geo_grammar, dar=True)
    params = parser.params
    tags = params.all_tags()
    for name, t in params.tensors.items():
        for idx in (0, t.size - 1) if t.size else ():
            assert params.partition_of(name, idx) in tags
    g_mask = params.mask_for({SHARED})
    s_mask = params.mask_for({task_tag("geo")})
    assert set(g_mask["action_emb"]).isdisjoint(s_mask["action_emb"])
    assert "dar_phi/geo" in s_mask and "dar_phi/geo" not in g_mask


def test_masked_step_leaves_other_partitions_bitwise(geo_grammar):
    parser, scope, batch = build(geo_grammar, dar=True)
    before = parser.params.copy_tensors()
    mask = parser.params.mask_for({task_tag("geo")})
    _, grads = parser.loss_and_grad(batch, scope)
    Adam().step(parser.params.tensors, apply_mask(grads, mask), mask, 0.01)
    P = parser.params.tensors
    for name in P:
        if name not in mask:
            assert np.array_equal(P[name], before[name])
    frozen = np.setdiff1d(np.arange(P["action_emb"].shape[0]), mask["action_emb"])
    assert np.array_equal(P["action_emb"][frozen], before["action_emb"][frozen])


def test_training_is_deterministic(geo_grammar):
    flats = []
    for _ in range(2):
        parser, scope, batch = build(geo_grammar, seed=4)
        train(parser, scope, batch, 5)
        flats.append(parser.params.flat())
    assert np.array_equal(flats[0], flats[1])


def test_checkpoint_round_trip(tmp_path, geo_grammar):
    parser, scope, batch = build(geo_grammar, dar=True)
    opt = train(parser, scope, batch, 3)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, parser.params, opt, extra={"note": "x"})
    params, opt2, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert list(params.registry) == list(parser.params.registry)
    assert params.action_tags == parser.params.action_tags and params.tags == parser.params.tags
    for name, t in parser.params.tensors.items():
        assert np.array_equal(params.tensors[name], t)
    for name, slots in opt.state.items():
        for a, b in zip(slots, opt2.state[name]):
            assert np.array_equal(a, b)
    # training continues identically from the restored state
    train_batch = [encode_example(u, lf, geo_grammar, params, "geo") for u, lf in DATA]
    restored = Parser(params)
    for p, o in ((parser, opt), (restored, opt2)):
        _, grads = p.loss_and_grad(train_batch, scope if p is parser else ActionScope(geo_grammar, params))
        o.step(p.params.tensors, grads, p.params.mask_for(p.params.all_tags()), 0.01)
    assert np.array_equal(parser.params.flat(), restored.params.flat())


def test_config_validation():
    with pytest.raises(ValueError):
        ParserConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        ParserConfig(hidden_dim=7)


def test_gold_sequences_use_registry_ids(geo_grammar):
    parser, _, batch = build(geo_grammar)
    reg = parser.params.registry
    assert [reg[a] for a in batch[0].actions] == list(lf_to_actions(DATA[0][1], geo_grammar))
