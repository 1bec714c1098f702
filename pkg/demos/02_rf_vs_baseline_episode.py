"""One search episode for each system on the same cluttered scene.

Both systems start from the same pose in a scene with three occluders.  The
RF-guided planner knows roughly where the tag is and weights that region
heavily; the baseline treats every hidden region alike and stops once the
green target fills enough of its camera view.

    python demos/02_rf_vs_baseline_episode.py [seed]
"""
import sys
import time

from rfsearch.grasp.policy import ScriptedPolicy
from rfsearch.sim.episode import run_episode
from rfsearch.sim.harness import scenario_with_retries

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
scn, _ = scenario_with_retries(3, 10, seed)
target = next(o for o in scn.objects if o.tag == scn.target_tag)
print(f"scene seed {scn.seed}: target at {target.center.round(3)}, "
      f"{len(scn.objects)} objects")

for system in ("RfGuided", "Baseline"):
    log = []
    t = time.perf_counter()
    m = run_episode(scn, system, ScriptedPolicy(), log=log)
    replans = [r for r in log if r["event"] == "replan"]
    print(f"\n{system}: success={m.successful} explore={m.explore_distance:.2f} m "
          f"total={m.traveled_distance:.2f} m replans={m.replans} "
          f"stop={m.termination} ({time.perf_counter() - t:.1f}s)")
    for r in replans[:5]:
        print(f"   replan {r['replan']}: cost {r['init_cost']:.4f} -> {r['cost']:.4f}, "
              f"beta1={r['beta1']:.1f}, trace1={r['trace1']:.5f}")
    if len(replans) > 5:
        print(f"   ... {len(replans) - 5} more")
