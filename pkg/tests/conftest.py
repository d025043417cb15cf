import os

import pytest
from hypothesis import HealthCheck, settings

from clsp.corpus import SynthSpec, generate_synthetic
from clsp.grammar import Grammar

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

COUNT_GRAMMAR = """\
start Q
slot ent : city river lake
Q -> (count E)
E -> ent
"""

GEO_GRAMMAR = """\
# a small recursive grammar
start Q
slot ent : city river lake state
slot num : 1 2 3
Q -> (count E)
Q -> (largest E)
Q -> (top num E)
E -> ent
E -> (loc E E)
E -> (next_to ent)
"""


@pytest.fixture
def count_grammar():
    return Grammar.from_text(COUNT_GRAMMAR, name="count")


@pytest.fixture
def geo_grammar():
    return Grammar.from_text(GEO_GRAMMAR, name="geo")


@pytest.fixture(scope="session")
def tiny_stream():
    """Three small synthetic tasks, fast enough for unit-level training runs."""
    spec = SynthSpec(num_tasks=3, shared_rule_count=1, private_rule_count=3, leaf_vocab_size=4,
                     shared_leaf_count=1, max_arity=2, template_depth=1, examples_per_task=40, seed=3)
    return generate_synthetic(spec)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
