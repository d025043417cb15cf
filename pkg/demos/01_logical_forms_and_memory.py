"""Logical-form similarity, grammar actions and replay-memory selection.

Run with ``python demos/01_logical_forms_and_memory.py``.  Everything here
is CPU-cheap and deterministic.
"""
import numpy as np

from clsp.corpus import SynthSpec, generate_synthetic
from clsp.grammar import lf_to_actions
from clsp.logical_forms import lf_similarity, parse_lf
from clsp.sampling import default_support, make_entries, memory_entropy, select_memory

# --- 1. tree similarity ------------------------------------------------------
# Similarity counts matched (instance, edge) triples under the best node
# alignment, so swapping two arguments still keeps the root and its labels.
a = parse_lf("(count (loc river state))")
b = parse_lf("(count (loc state river))")
print("similarity(a, a) =", lf_similarity(a, a))
print("similarity(a, b) =", round(lf_similarity(a, b), 3))

# --- 2. a synthetic task stream ----------------------------------------------
tasks = generate_synthetic(SynthSpec(num_tasks=2, examples_per_task=120, seed=0))
td = tasks[0]
utt, lf = td.train[0]
print(f"\ntask {td.task}: {len(td.train)} train examples, {len(td.grammar.actions())} grammar actions")
print("utterance:", utt)
print("LF       :", lf)
print("actions  :", [str(x) for x in lf_to_actions(parse_lf(lf), td.grammar)])

# --- 3. memory samplers ------------------------------------------------------
# DLFS clusters the LFs and then picks one example per cluster so that the
# action histogram of the memory is as flat as possible.
entries = make_entries(td.train, td.grammar, td.task)
support = default_support(entries)
print("\nmemory entropy over the action support (M=10, 5 seeds):")
for sampler in ("random", "lfs", "dlfs"):
    hs = [memory_entropy(select_memory(sampler, entries, 10, seed, td.task), support) for seed in range(5)]
    print(f"  {sampler:<7} {np.mean(hs):.3f}")
