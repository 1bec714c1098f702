import numpy as np
import pytest

from rfsearch import world
from rfsearch.errors import ScenarioInfeasible
from rfsearch.grasp.policy import GraspAction, ScriptedPolicy
from rfsearch.sim import physics
from rfsearch.sim.baseline import baseline_planner_step
from rfsearch.sim.episode import EpisodeBudget, System, run_episode
from rfsearch.sim.physics import OutcomeKind, execute_grasp
from rfsearch.sim.scenario import (ScenarioConfig, generate_grasp_scene, generate_scenario,
                                   load_scenario, save_scenario)
from rfsearch.world import ObjectKind, Scene, SceneObject


def block(i, lo, hi, tag=None):
    return SceneObject(i, ObjectKind.BLOCK, lo, hi, tag=tag)


# --- physics ------------------------------------------------------------------

def two_blocks():
    target = block(0, [0.30, 0.30, 0.0], [0.34, 0.34, 0.04], tag=1)
    other = block(1, [0.40, 0.30, 0.0], [0.44, 0.34, 0.04])
    return Scene([target, other])


def test_grasp_target_center():
    s = two_blocks()
    out = execute_grasp(s, GraspAction([0.32, 0.32, 0.04], 0.0), 1)
    assert out.kind is OutcomeKind.GRASPED_TARGET
    assert len(s.objects) == 1 and s.by_tag(1) is None and not s.discarded


def test_grasp_empty_table():
    s = two_blocks()
    out = execute_grasp(s, GraspAction([0.1, 0.1, 0.0], 0.0), 1)
    assert out.kind is OutcomeKind.GRASPED_NOTHING and len(s.objects) == 2


def test_grasp_other_reports_distance():
    # 1.8 cm wide low target, taller distractor flush against it
    target = block(0, [0.301, 0.30, 0.0], [0.319, 0.34, 0.02], tag=1)
    other = block(1, [0.319, 0.30, 0.0], [0.349, 0.34, 0.06])
    s = Scene([target, other])
    g = np.array([0.324, 0.32, 0.01])   # 5 mm inside the distractor, 1.4 cm from the target center
    out = execute_grasp(s, GraspAction(g, np.pi / 2), 1)
    assert out.kind is OutcomeKind.GRASPED_OTHER and out.object_id == 1
    assert out.d == pytest.approx(0.014, abs=1e-12)
    assert len(s.discarded) == 1 and len(s.objects) == 1


def test_grasp_rules():
    s = two_blocks()
    # near the edge of the footprint
    assert physics.grasp_feasibility(s, [0.302, 0.32, 0.04], 0.0)[1] == "edge"
    # jaw along a 4 cm side closes across 4 cm, fine; a wide slab is too wide
    wide = Scene([block(0, [0.2, 0.2, 0.0], [0.3, 0.3, 0.02])])
    assert physics.grasp_feasibility(wide, [0.25, 0.25, 0.02], 0.0)[1] == "too wide"
    # a cover on top blocks the target
    cov = Scene(list(two_blocks().objects) + [
        SceneObject(5, ObjectKind.COVER, [0.29, 0.29, 0.04], [0.35, 0.35, 0.05])])
    target_only = physics.grasp_feasibility(cov, [0.32, 0.32, 0.04], 0.0)
    assert target_only[0].id == 5   # the grasp acts on the highest object, the cover
    # a tall neighbour too close to the finger
    tight = Scene([block(0, [0.30, 0.30, 0.0], [0.34, 0.34, 0.04], tag=1),
                   block(1, [0.3675, 0.30, 0.0], [0.40, 0.34, 0.06])])
    assert physics.grasp_feasibility(tight, [0.32, 0.32, 0.04], 0.0)[1] == "finger collision"
    assert physics.grasp_feasibility(tight, [0.32, 0.32, 0.04], np.pi / 2)[0].id == 0


def test_object_count_drops_by_one_per_grasp():
    rng = np.random.default_rng(0)
    for seed in range(10):
        scene, tag = generate_grasp_scene(seed)
        n = len(scene.objects)
        for _ in range(5):
            o = scene.objects[rng.integers(len(scene.objects))]
            out = execute_grasp(scene, GraspAction([*o.center[:2], o.hi[2]],
                                                   rng.uniform(0, np.pi)), tag)
            n -= out.grasped
            assert len(scene.objects) == n
            if out.kind is OutcomeKind.GRASPED_TARGET:
                break


# --- scenarios -----------------------------------------------------------------

def test_scenario_determinism(tmp_path):
    a = generate_scenario(3, 10, 42)
    b = generate_scenario(3, 10, 42)
    assert a.to_dict() == b.to_dict()
    assert generate_scenario(3, 10, 43).to_dict() != a.to_dict()
    save_scenario(a, tmp_path / "s.json")
    assert load_scenario(tmp_path / "s.json").to_dict() == a.to_dict()


def test_scenario_counts_and_layout():
    s = generate_scenario(2, 6, 5)
    kinds = [o.kind for o in s.objects]
    assert kinds.count(ObjectKind.OBSTACLE) == 2
    assert sum(o.tag is None and o.kind is ObjectKind.BLOCK for o in s.objects) == 6
    objs = s.objects
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            assert not (np.all(a.lo < b.hi) and np.all(b.lo < a.hi)), (a.id, b.id)


def test_m0_target_in_view():
    s = generate_scenario(0, 5, 1)
    scene, cam = s.make_scene(), s.start_camera()
    grid = world.integrate_observation(world.VoxelGrid.empty(), cam, scene)
    assert world.count_target_pixels(cam, scene) > 0
    assert world.visible_fraction(grid, scene.by_tag(s.target_tag).center) > 0.1


@pytest.mark.parametrize("seed", range(5))
def test_m1_target_hidden(seed):
    s = generate_scenario(1, 5, seed)
    scene, cam = s.make_scene(), s.start_camera()
    grid = world.integrate_observation(world.VoxelGrid.empty(), cam, scene)
    assert world.visible_fraction(grid, scene.by_tag(s.target_tag).center) < 0.1


def test_scenario_argument_checks():
    with pytest.raises(ValueError):
        generate_scenario(6, 5, 0)
    with pytest.raises(ValueError):
        generate_scenario(1, 0, 0)
    with pytest.raises(ScenarioInfeasible):
        generate_scenario(5, 15, 0, ScenarioConfig(max_tries=1, obstacle_size=(0.5, 0.6)))


# --- episodes ------------------------------------------------------------------

def test_zero_budget_episode():
    s = generate_scenario(1, 5, 0)
    m = run_episode(s, System.RF_GUIDED, ScriptedPolicy(),
                    EpisodeBudget(max_explore_distance=0.0))
    assert not m.successful and m.grasp_attempts == 0 and m.explore_distance == 0.0


def test_exposed_target_single_attempt():
    s = generate_scenario(0, 5, 1)
    log = []
    m = run_episode(s, System.RF_GUIDED, ScriptedPolicy(), log=log)
    assert m.successful and m.grasp_attempts == 1 and m.target_grasped_at_attempt == 1
    assert m.explore_distance == 0.0
    # the only travel is descending to the grasp point and lifting
    start = np.asarray(m.path[0])
    approach = np.asarray(m.path[1])
    assert m.traveled_distance == pytest.approx(np.linalg.norm(approach - start) + 0.1)


def test_cover_is_removed_before_target():
    s = generate_scenario(0, 5, 2, ScenarioConfig(cover=True))
    log = []
    m = run_episode(s, System.RF_GUIDED, ScriptedPolicy(), log=log)
    grasps = [r for r in log if r["event"] == "grasp"]
    assert grasps[0]["outcome"] == "GraspedOther" and grasps[0]["confirmed"] is False
    assert grasps[1]["outcome"] == "GraspedTarget" and grasps[1]["confirmed"] is True
    assert m.successful and m.grasp_attempts == 2


def test_distance_is_path_sum_and_episode_is_deterministic():
    s = generate_scenario(1, 5, 3)
    a = run_episode(s, System.RF_GUIDED, ScriptedPolicy())
    b = run_episode(s, System.RF_GUIDED, ScriptedPolicy())
    pts = np.asarray(a.path)
    total = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    assert abs(a.traveled_distance - total) < 1e-9
    assert a.explore_distance <= a.traveled_distance + 1e-12
    assert a.as_row() == b.as_row() and a.path == b.path


def test_budget_bounds_explore_distance():
    s = generate_scenario(2, 5, 4)
    m = run_episode(s, System.BASELINE, ScriptedPolicy(), EpisodeBudget(max_explore_distance=0.4))
    assert m.explore_distance <= 0.4 + 1e-12
    assert m.grasp_attempts <= 10


# --- baseline termination --------------------------------------------------------

def test_baseline_pixel_threshold_edge():
    s = generate_scenario(0, 5, 1)
    scene, cam = s.make_scene(), s.start_camera()
    n = world.count_target_pixels(cam, scene, 160, 120)
    assert n > 0
    grid = world.VoxelGrid.empty()
    u, stop = baseline_planner_step(None, grid, cam, scene, start=s.start, pixel_threshold=n - 1)
    assert stop and np.all(u == 0)
    _, stop = baseline_planner_step(None, grid, cam, scene, start=s.start, pixel_threshold=n)
    assert not stop
