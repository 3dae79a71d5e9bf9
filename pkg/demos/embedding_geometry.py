"""Look at how the goal block of the embedding clusters on point_goal, next to an undivided encoder.

    python demos/embedding_geometry.py [iterations] [out_dir]

Both models are probed for two episodes on every test task. The purity ratio
divides the mean distance between tasks sharing a goal label by the mean
distance between tasks with different goals, so lower means tighter goal
clusters. SVG scatter plots of the 2-d PCA projection land in ``out_dir``.
"""
import sys
from pathlib import Path

import numpy as np

from dovmeta.analysis import cluster_purity, dump_embeddings, pca2d, write_svg
from dovmeta.config import ExperimentConfig
from dovmeta.trainer import run

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 100
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

for label, extra in [("split", {}), ("pearl", {"pearl_baseline": True})]:
    cfg = ExperimentConfig(env={"family": "point_goal"}, iterations=iterations, seed=0, **extra)
    agent = run(cfg, write=False).agent
    dump = dump_embeddings(agent, agent.test_tasks, np.random.default_rng(3), n_episodes=2)
    d = cfg.latent_dim
    # the undivided encoder is compared on a slice of the same width as one block
    dims = None if agent.num_blocks == 2 else slice(0, d)
    ratio = cluster_purity(dump, 0, block=0, dims=dims)
    points = dump.block(0) if dims is None else dump.block(0)[:, dims]
    coords, frac, _ = pca2d(points)
    path = out / f"goal_{label}.svg"
    write_svg(coords, [r.combo[0] for r in dump.rows], path, title=f"{label}: coloured by goal")
    print(f"{label:5s} goal purity {ratio:.3f}  PCA explains {frac.sum():.0%}  -> {path}")
