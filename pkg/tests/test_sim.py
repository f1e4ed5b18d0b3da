import dataclasses

import numpy as np
import pytest

from dualproc import body, sim
from dualproc.core import RobotState, gravity_in_body
from dualproc.errors import IllegalStateError, InvalidArgumentError


def _stand():
    return RobotState.standing()


def _hold_action(s: RobotState, cmd=(0.0, 0.0, 0.0)):
    return sim.Action(s.joint_q.copy(), np.array(cmd, dtype=float))


# --- domain randomization -------------------------------------------------


def test_sample_dr_friction_in_range():
    for seed in range(50):
        assert 0.3 <= sim.sample_dr(seed).friction <= 0.8


def test_sample_dr_deterministic():
    a, b = sim.sample_dr(0), sim.sample_dr(0)
    for f in dataclasses.fields(a):
        np.testing.assert_array_equal(getattr(a, f.name), getattr(b, f.name))


def test_sample_dr_monte_carlo_ranges():
    draws = [sim.sample_dr(s) for s in range(10_000)]
    checks = {
        "friction": sim.FRICTION_RANGE,
        "restitution": sim.RESTITUTION_RANGE,
        "joint_default_offset": sim.OFFSET_RANGE,
        "armature_scale": sim.ARMATURE_RANGE,
        "push_interval": sim.PUSH_INTERVAL_RANGE,
        "push_vel": sim.PUSH_VEL_RANGE,
    }
    for name, (lo, hi) in checks.items():
        v = np.array([np.asarray(getattr(d, name)) for d in draws])
        assert v.min() >= lo and v.max() <= hi
        span = hi - lo
        assert v.min() - lo < 0.01 * span and hi - v.max() < 0.01 * span


# --- reset ----------------------------------------------------------------


def test_reset_zero_offsets_keeps_joints():
    start = RobotState.from_joints(np.linspace(-0.2, 0.3, 12))
    s = sim.reset(None, start, sim.DRParams.nominal())
    np.testing.assert_array_equal(s.robot.joint_q, start.joint_q)
    assert s.time == 0.0 and not s.terminated


def test_reset_offset_is_additive():
    start = _stand()
    dr = sim.DRParams.nominal()
    off = np.zeros(12)
    off[3] = 0.05
    dr = dataclasses.replace(dr, joint_default_offset=off)
    s = sim.reset(None, start, dr)
    assert s.robot.joint_q[3] == pytest.approx(start.joint_q[3] + 0.05, abs=1e-15)
    np.testing.assert_allclose(s.robot.body_pos, body.body_positions(s.robot.joint_q), atol=1e-12)


def test_reset_next_push_in_window():
    for seed in range(20):
        s = sim.reset(None, _stand(), sim.sample_dr(seed))
        assert 10.0 <= s.next_push_time <= 15.0


def test_reset_rejects_inconsistent_start():
    bad = dataclasses.replace(_stand(), body_pos=np.zeros((12, 3)))
    with pytest.raises(InvalidArgumentError):
        sim.reset(None, bad, sim.DRParams.nominal())


# --- step -----------------------------------------------------------------


def test_equilibrium_is_exact():
    start = RobotState.from_joints(np.linspace(-0.3, 0.4, 12), xy=(1.0, -2.0), yaw=0.7)
    s = sim.reset(None, start, sim.DRParams.nominal())
    a = _hold_action(start)
    s0 = s.robot.to_flat()
    for _ in range(500):
        s = sim.step(s, a)
    assert np.max(np.abs(s.robot.to_flat() - s0)) < 1e-9


def test_root_velocity_first_order_response():
    dr = sim.DRParams.nominal(friction=0.5)
    s = sim.reset(None, _stand(), dr)
    a = _hold_action(_stand(), (1.0, 0.0, 0.0))
    tau = sim.TAU0 / dr.friction
    for k in range(1, 301):
        s = sim.step(s, a)
        if k in (10, 50, 300):
            expected = 1.0 - np.exp(-k * 0.02 / tau)
            assert s.robot.root_lin_vel[0] == pytest.approx(expected, rel=1e-9)
    np.testing.assert_allclose(s.robot.root_lin_vel[:2], [1.0, 0.0], atol=0.01)


def test_root_command_is_heading_frame():
    s = sim.reset(None, RobotState.standing(yaw=np.pi / 2), sim.DRParams.nominal())
    a = _hold_action(_stand(), (1.0, 0.0, 0.0))
    for _ in range(400):
        s = sim.step(s, a)
    np.testing.assert_allclose(s.robot.root_lin_vel[:2], [0.0, 1.0], atol=1e-6)


def test_joint_servo_matches_continuous_solution():
    # critically damped from rest: e(t) = e0 (1 + w t) exp(-w t)
    arm = np.full(12, 0.5)
    dr = dataclasses.replace(sim.DRParams.nominal(), armature_scale=arm)
    s = sim.reset(None, _stand(), dr)
    target = np.full(12, 0.2)
    a = sim.Action(target, np.zeros(3))
    w = sim.OMEGA0 / np.sqrt(0.5)
    for k in range(1, 31):
        s = sim.step(s, a)
    t = 30 * 0.02
    expected = 0.2 + (0.0 - 0.2) * (1 + w * t) * np.exp(-w * t)
    np.testing.assert_allclose(s.robot.joint_q, expected, rtol=1e-10)


def test_push_adds_bounded_velocity():
    for seed in range(10):
        dr = sim.sample_dr(seed)
        s = sim.reset(None, _stand(), dr)
        a = _hold_action(_stand())
        t_push = s.next_push_time
        prev_v = s.robot.root_lin_vel.copy()
        while s.push_index == 0:
            prev_v = s.robot.root_lin_vel.copy()
            s = sim.step(s, a)
        assert 10.0 <= s.time <= 15.0 + 0.02 and s.time >= t_push
        dv = s.robot.root_lin_vel[:2] - prev_v[:2]
        np.testing.assert_allclose(dv, dr.push_vel[0], atol=1e-12)
        assert np.all(np.abs(dv) <= 0.5)
        assert s.next_push_time == pytest.approx(t_push + dr.push_interval[1])


def test_step_after_termination_raises():
    s = sim.terminate(sim.reset(None, _stand(), sim.DRParams.nominal()), "position")
    assert s.termination_reason == "position"
    with pytest.raises(IllegalStateError):
        sim.step(s, _hold_action(_stand()))


def test_time_non_decreasing_and_map_consistent():
    rng = np.random.default_rng(0)
    s = sim.reset(None, _stand(), sim.sample_dr(3))
    last = s.time
    for _ in range(200):
        a = sim.Action(rng.uniform(-2, 2, 12), rng.uniform(-1, 1, 3))
        s = sim.step(s, a)
        assert s.time >= last
        last = s.time
        np.testing.assert_allclose(s.robot.body_pos, body.body_positions(s.robot.joint_q), atol=1e-9)
        z, roll, pitch = body.root_posture(s.robot.joint_q)
        assert s.robot.root.position[2] == pytest.approx(z, abs=1e-12)


def test_joint_velocity_bound():
    rng = np.random.default_rng(1)
    for seed in range(5):
        dr = sim.sample_dr(seed)
        s = sim.reset(None, _stand(), dr)
        bound = sim.joint_velocity_bound(dr.armature_scale)
        for k in range(400):
            # bang-bang targets are the worst case for the servo
            if k % 7 == 0:
                tgt = np.where(rng.random(12) < 0.5, body.JOINT_LOWER, body.JOINT_UPPER) * 3
            s = sim.step(s, sim.Action(tgt, np.zeros(3)))
            assert np.all(np.abs(s.robot.joint_qd) <= bound * (1 + 1e-9))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        s = sim.reset(None, _stand(), sim.sample_dr(4))
        out = []
        for _ in range(800):
            s = sim.step(s, sim.Action(rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 3)))
            out.append(s.robot.to_flat())
        return np.array(out)

    assert np.array_equal(run(), run())


def test_step_rejects_bad_action():
    s = sim.reset(None, _stand(), sim.DRParams.nominal())
    with pytest.raises(InvalidArgumentError):
        sim.step(s, np.full(15, np.nan))


# --- termination ----------------------------------------------------------


def test_termination_on_reference_is_false():
    s = sim.reset(None, _stand(), sim.DRParams.nominal())
    assert sim.check_early_termination(s, _stand()) == (False, None)


def test_termination_position():
    s = sim.reset(None, _stand(), sim.DRParams.nominal())
    ref = RobotState.standing(xy=(0.6, 0.0))
    assert sim.check_early_termination(s, ref) == (True, "position")


def test_termination_orientation_gravity_oracle():
    s = sim.reset(None, _stand(), sim.DRParams.nominal())
    pitched = dataclasses.replace(s.robot, root=dataclasses.replace(s.robot.root, pitch=np.pi / 2))
    s = dataclasses.replace(s, robot=pitched)
    # upright: g_z = -1; pitched 90 deg: g_z = -cos(pi/2) = 0; gap 1.0
    assert sim.orientation_gap(pitched.root.euler, _stand().root.euler) == pytest.approx(1.0)
    assert sim.check_early_termination(s, _stand()) == (True, "orientation")


@pytest.mark.parametrize("pitch", [0.3, -0.6, 1.2])
def test_projected_gravity_closed_form(pitch):
    g = gravity_in_body(0.0, 0.0, pitch)
    np.testing.assert_allclose(g, [np.sin(pitch), 0.0, -np.cos(pitch)], atol=1e-12)


# --- batched engine -------------------------------------------------------


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    n = 3
    b = sim.BatchSim(n)
    singles = []
    for i in range(n):
        dr = sim.sample_dr(10 + i)
        start = RobotState.from_joints(rng.uniform(-0.2, 0.2, 12), yaw=float(i))
        b.reset(i, start, dr)
        singles.append(sim.reset(None, start, dr))
    # short push intervals are not needed; run past the first push
    for _ in range(700):
        acts = rng.uniform(-1, 1, (n, 15))
        b.step(acts)
        singles = [sim.step(s, a) for s, a in zip(singles, acts)]
    for i in range(n):
        np.testing.assert_array_equal(b.frames[i], singles[i].robot.to_flat())
        assert b.push_index[i] == singles[i].push_index
