"""Physics-lite parallel-jaw grasp outcome.

A grasp at ``g`` with jaw angle ``theta`` acts on the highest object whose
footprint contains ``g``.  It succeeds when

* ``g`` lies inside that object's footprint shrunk by 5 mm,
* nothing rests on top of the object,
* the object fits between the open fingers (extent along the jaw <= 8.5 cm),
* both fingers land outside the object and at least 1 cm from every
  neighbour that reaches above the grasp height.

Grasped objects leave ``scene.objects``; anything but the target goes to
``scene.discarded``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

FOOTPRINT_MARGIN = 0.005
HALF_OPENING = 0.0425
MAX_WIDTH = 0.085
NEIGHBOR_CLEARANCE = 0.01
GRASP_DEPTH = 0.02   # fingers descend this far below the object's top
LIFT_HEIGHT = 0.1


class OutcomeKind(enum.Enum):
    GRASPED_TARGET = "GraspedTarget"
    GRASPED_OTHER = "GraspedOther"
    GRASPED_NOTHING = "GraspedNothing"


@dataclass(frozen=True)
class GraspOutcome:
    kind: OutcomeKind
    d: Optional[float] = None
    object_id: Optional[int] = None

    @property
    def grasped(self) -> bool:
        return self.kind is not OutcomeKind.GRASPED_NOTHING


NOTHING = GraspOutcome(OutcomeKind.GRASPED_NOTHING)


def _in_footprint(xy, obj, margin=0.0):
    return bool(np.all(xy >= obj.lo[:2] + margin) and np.all(xy <= obj.hi[:2] - margin))


def _footprints_overlap(a, b):
    return bool(np.all(a.lo[:2] < b.hi[:2]) and np.all(a.hi[:2] > b.lo[:2]))


def _point_box_distance_2d(xy, obj):
    d = np.maximum(np.maximum(obj.lo[:2] - xy, xy - obj.hi[:2]), 0.0)
    return float(np.hypot(d[0], d[1]))


def grasp_feasibility(scene, g, theta):
    """The object a grasp would lift, or None, with the reason as a string."""
    g = np.asarray(g, float)
    xy = g[:2]
    under = [o for o in scene.objects if _in_footprint(xy, o)]
    if not under:
        return None, "empty"
    obj = max(under, key=lambda o: (o.hi[2], -o.id))
    if not _in_footprint(xy, obj, FOOTPRINT_MARGIN):
        return None, "edge"
    for o in scene.objects:
        if o is not obj and o.lo[2] >= obj.hi[2] - 1e-9 and _footprints_overlap(o, obj):
            return None, "covered"
    d = np.array([np.cos(theta), np.sin(theta)])
    size = obj.size
    if abs(d[0]) * size[0] + abs(d[1]) * size[1] > MAX_WIDTH + 1e-12:
        return None, "too wide"
    z_grasp = obj.hi[2] - min(GRASP_DEPTH, 0.5 * size[2])
    for sign in (1.0, -1.0):
        finger = xy + sign * HALF_OPENING * d
        if _in_footprint(finger, obj):
            return None, "finger on object"
        for o in scene.objects:
            if o is obj or o.hi[2] <= z_grasp:
                continue
            if _point_box_distance_2d(finger, o) < NEIGHBOR_CLEARANCE:
                return None, "finger collision"
    return obj, "ok"


def execute_grasp(scene, action, target_tag) -> GraspOutcome:
    """Apply a grasp to ``scene`` in place and report what was lifted."""
    g = np.asarray(getattr(action, "g", action), float)
    theta = float(getattr(action, "theta", 0.0))
    obj, _ = grasp_feasibility(scene, g, theta)
    if obj is None:
        return NOTHING
    scene.objects.remove(obj)
    if obj.tag is not None and obj.tag == target_tag:
        return GraspOutcome(OutcomeKind.GRASPED_TARGET, 0.0, obj.id)
    scene.discarded.append(obj)
    target = scene.by_tag(target_tag)
    d = float(np.linalg.norm(target.center - g)) if target is not None else float("inf")
    return GraspOutcome(OutcomeKind.GRASPED_OTHER, d, obj.id)
