import json

import numpy as np
import pytest

from dualproc import datagen as D
from dualproc.core import DEFAULT_STRIDE, mirror_trajectory, wrap_angle
from dualproc.errors import ConfigError, GenerationError
from dualproc.render import SITTABLE, SceneObject

SMALL_MIX = {
    "vl_trajectories": {"nav_towards": 2, "nav_around": 1, "sit": 1},
    "vl_variants": 2,
    "blind_trajectories": {"locomotion": 2, "reach": 1, "sit": 1},
    "blind_variants": 2,
}


def _demo(cat, seed, blind=False, **kw):
    task = D.sample_task(cat, np.random.default_rng(seed), blind=blind, **kw)
    return task, D.synthesize_demo(task, seed, blind)


def test_nav_towards_geometry_oracle():
    task = D.TaskSpec("nav_towards", D.ObjectTarget("chair", "green", 3.0, 0.0, 0.0), 0, "objective", "front")
    scene = D.build_scene(task, 0)
    traj = D.generate_motion(task, scene, 0)
    p = np.array([3.0, 0.0])
    end = traj.position[-1, :2]
    assert abs(np.linalg.norm(p - end) - 0.5) <= 0.05
    bearing = np.arctan2(p[1] - end[1], p[0] - end[0])
    assert abs(wrap_angle(bearing - traj.yaw[-1])) < np.deg2rad(5)


@pytest.mark.parametrize("seed", range(15))
def test_nav_towards_random_targets(seed):
    task, rec = _demo("nav_towards", seed)
    p = D.target_position(task)
    end = rec.traj.position[-1, :2]
    assert abs(np.linalg.norm(p - end) - 0.5) <= 0.05
    assert abs(wrap_angle(np.arctan2(*(p - end)[::-1]) - rec.traj.yaw[-1])) < np.deg2rad(5)


@pytest.mark.parametrize("seed", range(10))
def test_sit_contract(seed):
    task, rec = _demo("sit", seed)
    tr = rec.traj
    assert abs(tr.position[-1, 2] - 0.45) <= 0.01
    # seated facing away from the backrest direction
    assert abs(wrap_angle(tr.yaw[-1] - (task.target.yaw + np.pi))) < np.deg2rad(5)
    assert np.linalg.norm(tr.position[-1, :2] - D.target_position(task)) < 0.3


@pytest.mark.parametrize("seed", range(8))
def test_nav_around_sweeps_half_circle(seed):
    task, rec = _demo("nav_around", seed)
    c = D.target_position(task)
    rel = rec.traj.position[:, :2] - c
    r = np.linalg.norm(rel, axis=1)
    on_arc = np.abs(r - 1.0) < 0.15
    ang = np.unwrap(np.arctan2(rel[on_arc, 1], rel[on_arc, 0]))
    assert abs(ang[-1] - ang[0]) >= np.pi - 0.1


def test_locomotion_speed_range():
    for seed in range(20):
        task, rec = _demo("locomotion", seed, blind=True)
        v = np.linalg.norm(rec.traj.root_lin_vel[-20:, :2], axis=1)
        assert 0.5 - 1e-9 <= v.mean() <= 2.0 + 1e-9


def test_reach_root_stationary():
    task, rec = _demo("reach", 3, blind=True)
    assert np.ptp(rec.traj.position[:, :2], axis=0).max() == 0.0
    goal = D.REACH_POSES[task.target.kind]
    for j, v in goal.items():
        assert rec.traj.joint_q[-1, j] == pytest.approx(v)


def test_nav_duration_mean_matches_table():
    durs = []
    for seed in range(100):
        cat = D.NAV[seed % 2]
        _, rec = _demo(cat, seed)
        durs.append(rec.traj.duration)
    assert abs(np.mean(durs) - 4.61) <= 0.2 * 4.61


def test_other_category_durations():
    sit = np.mean([_demo("sit", s)[1].traj.duration for s in range(30)])
    reach = np.mean([_demo("reach", s, blind=True)[1].traj.duration for s in range(30)])
    assert abs(sit - 3.2) <= 0.2 * 3.2
    assert abs(reach - 1.7) <= 0.2 * 1.7


# --- scenes ---------------------------------------------------------------


def test_objective_scene_has_one_object():
    task, _ = _demo("nav_towards", 1, clutter_level="objective")
    assert len(D.build_scene(task, 5).objects) == 1


def test_rear_spawn_angle():
    for seed in range(20):
        task = D.sample_task("nav_towards", np.random.default_rng(seed), spawn_relation="rear")
        scene = D.build_scene(task, seed)
        p = scene.objects[0].position
        assert abs(np.arctan2(p[1], p[0])) > 3 * np.pi / 4


def test_front_spawn_angle():
    for seed in range(20):
        task = D.sample_task("nav_towards", np.random.default_rng(seed), spawn_relation="front")
        p = D.build_scene(task, seed).objects[0].position
        assert abs(np.arctan2(p[1], p[0])) <= np.pi / 4 + 1e-12


def test_cluttered_scenes_do_not_overlap():
    for seed in range(100):
        task = D.sample_task("nav_towards", np.random.default_rng(seed), clutter_level="cluttered")
        scene = D.build_scene(task, seed)
        assert len(scene.objects) >= 6
        objs = scene.objects
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                d = np.hypot(objs[i].position[0] - objs[j].position[0], objs[i].position[1] - objs[j].position[1])
                assert d > objs[i].footprint + objs[j].footprint


def test_target_inside_clutter_raises():
    task = D.TaskSpec("nav_towards", D.ObjectTarget("chair", "green", 3.0, 0.0), 0, "objective", "front")
    scene = D.build_scene(task, 0)
    crowded = type(scene)(scene.objects + (SceneObject("box", "red", (3.6, 0.0)),), scene.floor_texture)
    with pytest.raises(GenerationError):
        D.generate_motion(task, crowded, 0)


def test_sit_requires_sittable():
    with pytest.raises(GenerationError):
        D.TaskSpec("sit", D.ObjectTarget("table", "red", 1.0, 0.0))


def test_train_and_eval_combos_disjoint():
    tr, ev = set(D.combos_for("train")), set(D.combos_for("eval"))
    assert tr.isdisjoint(ev) and tr | ev == {(c, k) for c in D.COLORS for k in D.CLASSES}
    assert any(k in SITTABLE for _, k in ev)


# --- instructions ---------------------------------------------------------


def test_instruction_template_example():
    task = D.TaskSpec("nav_towards", D.ObjectTarget("chair", "red", 3.0, 0.0), 0, "objective", "front")
    scene = D.build_scene(task, 0)
    texts = {D.annotate_instruction(task, scene, False, s) for s in range(40)}
    assert "walk towards the red chair" in texts


def test_blind_turn_left_has_cue():
    task = D.TaskSpec("locomotion", D.MotionTarget("turn_left", 0.8, 0.6, 3.0))
    for s in range(10):
        assert "left" in D.annotate_instruction(task, D.build_scene(task, s), True, s).split()


def test_blind_instructions_always_cued():
    for cat in ("locomotion", "reach", "sit"):
        for s in range(20):
            task = D.sample_task(cat, np.random.default_rng(s), blind=True)
            words = D.annotate_instruction(task, D.build_scene(task, s), True, s).split()
            assert any(w in D.CUE_WORDS for w in words)


def test_instruction_deterministic():
    task = D.sample_task("sit", np.random.default_rng(4))
    scene = D.build_scene(task, 4)
    assert D.annotate_instruction(task, scene, False, 9) == D.annotate_instruction(task, scene, False, 9)


def test_paraphrase_bank_sizes():
    for name, bank in D.TEMPLATES.items():
        assert 3 <= len(bank) <= 5, name


# --- records & mirroring --------------------------------------------------


def test_image_tick_count():
    task = D.TaskSpec("locomotion", D.MotionTarget("walk_forward", 0.8, 0.0, 4.0))
    rec = D.synthesize_demo(task, 0, blind=False, with_images=True)
    assert len(rec.traj) == 201
    assert rec.n_ticks == 201 // DEFAULT_STRIDE == 40
    assert rec.images.shape == (40, 2, 64, 64, 3)


def test_blind_record_has_no_images():
    _, rec = _demo("reach", 0, blind=True)
    assert rec.blind and rec.images is None
    a, b = rec.image_pair(0)
    assert np.array_equal(a.pixels, D.noise_pair(rec.seed, 0)[0].pixels)


def test_mirrored_companion_flip_oracle():
    for seed in range(12):
        task = D.sample_task(D.NAV[seed % 2], np.random.default_rng(seed), spawn_relation="front")
        a = D.synthesize_demo(task, seed, False, motion_seed=7)
        b = D.synthesize_demo(task, seed, False, motion_seed=7, mirrored=True)
        np.testing.assert_allclose(b.traj.data, mirror_trajectory(a.traj).data, atol=1e-12)
        for oa, ob in zip(a.scene.objects, b.scene.objects):
            assert ob.position == (oa.position[0], -oa.position[1])
        wa, wb = a.instruction.split(), b.instruction.split()
        swap = {"left": "right", "right": "left", "clockwise": "counterclockwise", "counterclockwise": "clockwise"}
        assert wb == [swap.get(w, w) for w in wa]


def test_images_rerender_bit_identically():
    task = D.sample_task("nav_towards", np.random.default_rng(2), clutter_level="distractor")
    rec = D.synthesize_demo(task, 2, False, with_images=True)
    again = D.synthesize_demo(task, 2, False)
    assert np.array_equal(rec.images, again.render_images())


# --- mixtures -------------------------------------------------------------


def test_default_mixture_blind_fraction():
    plan = D.plan_mixture(None, 0)
    frac = sum(p["blind"] for p in plan) / len(plan)
    assert abs(frac - 0.384) <= 0.02
    assert sum(not p["blind"] for p in plan) == 512 and sum(p["blind"] for p in plan) == 320


def test_empty_config():
    ds = D.assemble_mixture({"vl_trajectories": {}, "blind_trajectories": {}}, 0)
    assert len(ds) == 0 and ds.mixture_meta == {}


def test_mixture_bookkeeping_and_unique_seeds():
    ds = D.assemble_mixture(SMALL_MIX, 3)
    assert sum(ds.mixture_meta.values()) == len(ds) == 16
    assert len({r.seed for r in ds.records}) == len(ds)
    assert ds.mixture_meta["sit/blind"] == 2 and ds.mixture_meta["nav_towards/vl"] == 4
    assert [r.mirrored for r in ds.records[:2]] == [False, True]


def test_bad_config():
    with pytest.raises(ConfigError):
        D.plan_mixture({"vl_trajectories": {"dance": 2}}, 0)
    with pytest.raises(ConfigError):
        D.plan_mixture({"vl_trajectories": {"locomotion": 2}}, 0)


def test_mixture_reproducible_and_roundtrip(tmp_path):
    a = D.assemble_mixture(SMALL_MIX, 5)
    b = D.assemble_mixture(SMALL_MIX, 5)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.traj.data, rb.traj.data) and ra.instruction == rb.instruction
    D.save_dataset(a, tmp_path / "d1")
    D.save_dataset(b, tmp_path / "d2")
    assert (tmp_path / "d1/manifest.json").read_bytes() == (tmp_path / "d2/manifest.json").read_bytes()
    back = D.load_dataset(tmp_path / "d1", load_images=True)
    assert json.loads((tmp_path / "d1/manifest.json").read_text())["mixture_meta"] == a.mixture_meta
    for ra, rb in zip(a.records, back.records):
        assert np.array_equal(ra.traj.data, rb.traj.data)
        assert ra.task == rb.task and ra.scene == rb.scene
        if not rb.blind:
            assert np.array_equal(rb.images, ra.render_images())
