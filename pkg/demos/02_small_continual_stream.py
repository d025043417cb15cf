"""Forgetting and its mitigation on a short synthetic stream.

Trains plain fine-tuning, episodic replay and fast/slow training with DLFS
memories on three tasks and prints ACC_whole after each task.  Takes
around a minute on one core.
"""
from clsp.continual import TrainSchedule, run_stream
from clsp.corpus import SynthSpec, generate_synthetic
from clsp.model import ParserConfig

tasks = generate_synthetic(SynthSpec(num_tasks=3, seed=1))
schedule = TrainSchedule(lr=0.01, ewc_lambda=100.0, capacity=10)
config = ParserConfig()

print(f"{'method':<10} " + " ".join(f"after {td.task:>3}" for td in tasks))
for method, sampler in (("FINE_TUNE", "none"), ("EMR", "random"), ("TR", "dlfs"), ("TR_EWC", "dlfs")):
    res = run_stream(tasks, method, sampler, schedule, seed=0, config=config, traces=False)
    curve = [res.evals.acc_whole(k) for k in range(len(tasks))]
    print(f"{method:<10} " + " ".join(f"{v:9.3f}" for v in curve))

# The diagonal of the accuracy matrix is accuracy right after training on a
# task; the entries to its right show how much of that survives later tasks.
print("\nTR_EWC accuracy matrix (row: test task, column: after task):")
print(res.evals.matrix().round(3))
