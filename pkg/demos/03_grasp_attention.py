"""Train the grasp Q-function briefly and compare attention settings.

Training runs on tight clutter without the RF kernel.  At test time the
same frozen weights are used with the RF kernel, with a flat kernel, and
against a random policy on identical scenes and RF fixes.

    python demos/03_grasp_attention.py [iterations] [scenes]
"""
import sys
import time

import numpy as np

from rfsearch.grasp import learning
from rfsearch.grasp.policy import QPolicy, RandomPolicy

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 200
scenes = int(sys.argv[2]) if len(sys.argv) > 2 else 40

t = time.perf_counter()
res = learning.train_policy(learning.TrainConfig(iterations=iterations, seed=0))
curve = np.array(res.curve)
print(f"trained {iterations} iterations in {time.perf_counter() - t:.0f}s")
for a in range(0, iterations, max(iterations // 5, 1)):
    chunk = curve[a:a + max(iterations // 5, 1)]
    print(f"  iter {a:4d}: loss {chunk[:, 1].mean():.4f}, mean reward {chunk[:, 2].mean():.3f}")

for name, policy, sigma in (("RF kernel", QPolicy(res.params), 0.01),
                            ("flat kernel", QPolicy(res.params, use_kernel=False), 0.0),
                            ("random", RandomPolicy(), 0.0)):
    ev = learning.evaluate_policy(policy, scenes, sigma=sigma)
    print(f"{name:>12}: {ev.successes}/{ev.scenes} scenes, {ev.attempts} attempts, "
          f"efficiency {ev.efficiency:.3f}")
