"""Colour-only baseline: the same belief-space planner without RF guidance."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import servo, world

TARGET_PIXELS = 100
RENDER_SIZE = (160, 120)


def baseline_planner(config: servo.PlannerConfig) -> servo.PlannerConfig:
    """Planner settings for the baseline: one weight for every region."""
    return replace(config, uniform_beta=True)


def baseline_planner_step(belief, grid, camera: world.CameraPose, scene, *, start,
                          weights=servo.CostWeights(), config=servo.PlannerConfig(),
                          replan_index=0, model=None, init_controls=None,
                          pixel_threshold=TARGET_PIXELS, render_size=RENDER_SIZE):
    """One baseline decision: ``(controls, terminate)``.

    The rendered view is checked first; more than ``pixel_threshold``
    target-coloured pixels ends exploration with zero controls.  Otherwise
    the plan is the uniform-weight optimum from a zero seed (or from
    ``init_controls`` when a restart seed is supplied).
    """
    T = config.horizon
    w, h = render_size
    if world.count_target_pixels(camera, scene, w, h) > pixel_threshold:
        return np.zeros((T, 6)), True
    if belief is None or belief.n_regions == 0:
        return np.zeros((T, 6)), False
    init = np.zeros((T, 6)) if init_controls is None else np.asarray(init_controls, float)
    plan = servo.optimize_trajectory(belief, grid, weights, init, T, start=start, model=model,
                                     config=baseline_planner(config),
                                     replan_index=replan_index)
    return plan.controls, False
