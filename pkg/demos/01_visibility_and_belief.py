"""How one occluder shapes the belief over a hidden region.

A wall stands between the sensor and an occluded region.  We sweep the
sensor sideways and print the smooth visibility factor and the trace of
the region's covariance after a short stare, showing the information the
planner can gain by moving around the wall.

    python demos/01_visibility_and_belief.py
"""
import numpy as np

from rfsearch import belief, world
from rfsearch.belief import BeliefModel, BeliefState
from rfsearch.servo import RobotState

wall = (np.array([0.30, 0.40, 0.0]), np.array([0.50, 0.44, 0.25]))
region_mean = np.array([0.40, 0.60, 0.05])
b0 = BeliefState(1e-4 * np.eye(6), region_mean[None], 0.004 * np.eye(3)[None])
model = BeliefModel().with_frontiers(world.frontier_patches([wall]))

print(f"{'x':>6} {'phi':>8} {'trace after 4 views':>20}")
for x in np.linspace(0.05, 0.75, 8):
    pose = RobotState.looking_at([x, 0.20, 0.15], region_mean).x
    traj, phi = belief.propagate_horizon(b0, np.repeat(pose[None], 4, 0), model, True)
    print(f"{x:6.2f} {phi[0, 0]:8.4f} {traj[-1].traces()[0]:20.6f}")

print("\nstarting trace", b0.traces()[0])
print("directly behind the wall the factor is ~0 and the trace stays put;"
      " stepping out to the side lets the filter shrink it.")
