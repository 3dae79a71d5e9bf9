"""Hold one physics setting out of training, then recover it from a single probed task.

    python demos/unseen_physics.py [iterations]

The probe task runs two episodes; its inferred physics block is reused for
every other task with that physics, paired with the goal targets learned in
training. Only the probe task is ever stepped before evaluation.
"""
import sys

import numpy as np

from dovmeta import zeroshot
from dovmeta.config import ExperimentConfig
from dovmeta.trainer import run

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 100
cfg = ExperimentConfig(env={"family": "point_goal", "holdout": {"physics": [2]}}, iterations=iterations, seed=0)
agent = run(cfg, write=False).agent
tasks = agent.holdout_tasks
probe = tasks[0]
print(f"held-out physics label 2: {len(tasks)} tasks, probing task {probe.task_id} (combo {probe.combo})")

rng = np.random.default_rng(5)
s2 = zeroshot.evaluate_s2(agent, tasks, 1, rng, probe_ids=[probe.task_id])
others = [t for t in tasks if t.task_id != probe.task_id]
prior = zeroshot.evaluate_prior(agent, others, rng)
print(f"composed return on the other {len(others)} tasks: {s2.mean:.2f}")
print(f"prior-embedding return on the same tasks: {prior.mean:.2f}")
print(f"environment steps before evaluation: {s2.pre_eval_interactions}")

try:
    zeroshot.compose_s1(agent.table, probe.combo)
except zeroshot.MissingLabelError as exc:
    print(f"plain composition is impossible here: {exc.args[0]}")
