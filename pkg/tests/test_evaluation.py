import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clsp.continual import build_params
from clsp.evaluation import (EvalResult, ActionProbTrace, acc_avg, acc_whole, count_correct, exact_match,
                             mean_action_probs, read_rows, trace_drop_by_class, write_rows)
from clsp.grammar import Grammar
from clsp.model import ActionScope, Parser, ParserConfig, encode_example


def test_exact_match():
    assert exact_match("(f a b)", "(f a b)")
    assert not exact_match("(f a b)", "(f b a)")
    assert exact_match("( f  a\tb )", "(f a b)")
    assert not exact_match(None, "(f a)")
    assert not exact_match("(f a", "(f a)")


def test_acc_avg_examples():
    assert acc_avg([0.6], 1) == 0.6
    assert acc_avg([1.0, 0.5]) == 0.75
    assert acc_avg([0.0, 0.0, 0.0]) == 0.0
    assert acc_avg([1.0, 0.5, 0.0], 2) == 0.75
    with pytest.raises(ValueError):
        acc_avg([1.0], 0)


def test_acc_whole_examples():
    assert acc_whole([10, 0], [10, 30]) == 0.25
    assert acc_whole([3], [4]) == 0.75
    assert acc_whole([], []) == 0.0


@given(st.lists(st.tuples(st.integers(1, 200), st.floats(0, 1)), min_size=1, max_size=8))
def test_acc_whole_is_count_weighted_mean(items):
    sizes = [n for n, _ in items]
    correct = [int(round(f * n)) for n, f in items]
    accs = [c / n for c, n in zip(correct, sizes)]
    weighted = sum(a * n for a, n in zip(accs, sizes)) / sum(sizes)
    assert abs(acc_whole(correct, sizes) - weighted) <= 1e-12


@given(st.integers(1, 50), st.lists(st.integers(0, 50), min_size=1, max_size=6))
def test_equal_sizes_whole_equals_avg(n, raw):
    correct = [min(c, n) for c in raw]
    assert abs(acc_whole(correct, [n] * len(correct)) - acc_avg([c / n for c in correct])) <= 1e-12


def test_eval_result_table():
    r = EvalResult(["a", "b"], [10, 30])
    r.record(0, 0, 9)
    r.record(0, 1, 10)
    r.record(1, 1, 0)
    with pytest.raises(ValueError):
        r.record(1, 0, 3)
    assert r.acc_whole(1) == 0.25 and r.acc_avg(1) == 0.5 and r.acc_whole(0) == 0.9
    m = r.matrix()
    assert np.isnan(m[1, 0]) and np.all((m[~np.isnan(m)] >= 0) & (m[~np.isnan(m)] <= 1))


def _toy(grammar_text, data):
    from clsp.corpus import TaskData

    g = Grammar.from_text(grammar_text, name="t")
    td = TaskData("t", g, data, [], data)
    params = build_params([td], ParserConfig(word_emb_dim=8, hidden_dim=8, action_emb_dim=4))
    enc = [encode_example(u, lf, g, params, "t") for u, lf in data]
    return Parser(params), ActionScope(g, params), enc, td


def test_evaluation_does_not_mutate_parameters():
    from conftest import GEO_GRAMMAR

    data = [("largest river", "(largest river)"), ("count lakes", "(count lake)")]
    parser, scope, enc, td = _toy(GEO_GRAMMAR, data)
    before = parser.params.flat().copy()
    count_correct(parser, td.test, "t", scope)
    mean_action_probs(parser, enc, scope)
    assert np.array_equal(before, parser.params.flat())


def test_forced_actions_trace_constant_one():
    g_text = "start Q\nslot e : x y\nQ -> (f e)\n"
    parser, scope, enc, _ = _toy(g_text, [("f of x", "(f x)"), ("f of y", "(f y)")])
    probs = mean_action_probs(parser, enc, scope)
    apply_id = parser.params.registry.id(scope.grammar.actions()[0])
    assert probs[apply_id] == 1.0
    # actions missing from the data have no trace
    assert len(probs) == 3


def test_trace_drop_by_class():
    traces = [ActionProbTrace(0, "a", "t1", "cross-task", [0.9, 0.85]),
              ActionProbTrace(1, "b", "t1", "task-specific", [0.8, 0.2]),
              ActionProbTrace(2, "c", "t1", "task-specific", [0.6, 0.4])]
    drops = trace_drop_by_class(traces)
    assert drops["cross-task"] == pytest.approx(0.05) and drops["task-specific"] == pytest.approx(0.4)
    assert math.isnan(trace_drop_by_class(traces[:1])["task-specific"])


def test_csv_round_trip(tmp_path):
    path = tmp_path / "x.csv"
    write_rows(path, [{"a": 1, "b": 0.1}], ("a", "b"))
    write_rows(path, [{"a": 2, "b": math.nan}], ("a", "b"), append=True)
    assert read_rows(path) == [{"a": "1", "b": "0.1"}, {"a": "2", "b": ""}]
