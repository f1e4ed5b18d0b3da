import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualproc import datagen as D
from dualproc import teacher as T
from dualproc.core import RobotState, rot6d_from_euler
from dualproc.errors import ConfigError, InvalidArgumentError
from dualproc.sim import DRParams, reset, terminate


def _sim(state=None, prev=None):
    s = reset(None, state or RobotState.standing(), DRParams.nominal())
    if prev is not None:
        from dataclasses import replace

        s = replace(s, prev_action=np.asarray(prev, float))
    return s


# --- observation ----------------------------------------------------------


def test_obs_dimension_and_layout():
    obs = T.teacher_observation(_sim(), RobotState.standing())
    assert obs.shape == (78,) == (T.OBS_DIM,)
    assert sum(n for _, n in T.OBS_LAYOUT) == 78


def test_obs_identical_reference():
    s = RobotState.from_joints(np.full(12, 0.1), xy=(1.0, 2.0), yaw=0.4)
    o = T.split_obs(T.teacher_observation(_sim(s), s))
    np.testing.assert_allclose(o["rel_ref_torso_pos"], 0.0, atol=1e-12)
    np.testing.assert_allclose(o["rel_ref_torso_rot6d"], [1, 0, 0, 0, 1, 0], atol=1e-12)
    np.testing.assert_array_equal(o["ref_joint_q_next"], s.joint_q)


def test_obs_reference_ahead_along_heading():
    yaw = 0.7
    robot = RobotState.standing(xy=(0.5, -0.2), yaw=yaw)
    ref = RobotState.standing(xy=(0.5 + np.cos(yaw), -0.2 + np.sin(yaw)), yaw=yaw)
    o = T.split_obs(T.teacher_observation(_sim(robot), ref))
    np.testing.assert_allclose(o["rel_ref_torso_pos"], [1.0, 0.0, 0.0], atol=1e-12)


def test_obs_relative_rotation_oracle():
    robot = RobotState.standing(yaw=0.3)
    ref = RobotState.standing(yaw=0.3 + 0.5)
    o = T.split_obs(T.teacher_observation(_sim(robot), ref))
    np.testing.assert_allclose(o["rel_ref_torso_rot6d"], rot6d_from_euler(0.5, 0.0, 0.0), atol=1e-12)


# --- reward -----------------------------------------------------------------


def test_perfect_tracking_reward():
    s = RobotState.standing()
    a = np.zeros(15)
    rb = T.tracking_reward(_sim(s, a), s, a, a)
    assert rb.torso_pos == rb.torso_ori == rb.body_pos == 1.0
    assert rb.joint_pos_err == rb.joint_vel_err == rb.action_rate == rb.joint_limit == rb.termination == 0.0
    assert rb.total == pytest.approx(1.3, abs=1e-15)


def test_torso_error_half_metre():
    ref = RobotState.standing()
    robot = RobotState.standing(xy=(0.5, 0.0))
    rb = T.tracking_reward(_sim(robot), ref, np.zeros(15), np.zeros(15))
    assert rb.torso_pos == pytest.approx(np.exp(-1.0), rel=1e-12)
    assert rb.torso_pos == pytest.approx(0.36787944, abs=1e-8)


def test_termination_step_penalty():
    s = RobotState.standing()
    a = np.zeros(15)
    alive = T.tracking_reward(_sim(s, a), s, a, a)
    dead = T.tracking_reward(terminate(_sim(s, a), "position"), s, a, a)
    assert dead.termination == 1.0 and alive.termination == 0.0
    assert dead.total - alive.total == pytest.approx(-200.0)


def test_joint_limit_indicator():
    q = np.zeros(12)
    q[4] = 1.95  # between the 90% soft limit (1.875) and the hard limit (2.0)
    s = RobotState.from_joints(q)
    rb = T.tracking_reward(_sim(s), s, np.zeros(15), np.zeros(15))
    assert rb.joint_limit == 1.0


def test_body_sum_switch():
    ref = RobotState.standing()
    robot = RobotState.standing(xy=(0.1, 0.0))
    s_sum = T.tracking_reward(_sim(robot), ref, np.zeros(15), np.zeros(15), body_sum=True)
    s_mean = T.tracking_reward(_sim(robot), ref, np.zeros(15), np.zeros(15), body_sum=False)
    assert s_sum.body_pos == pytest.approx(np.exp(-12 * 0.01 / 0.25))
    assert s_mean.body_pos == pytest.approx(np.exp(-0.01 / 0.25))


_q = st.lists(st.floats(-0.3, 0.3), min_size=12, max_size=12)


@settings(max_examples=60, deadline=None)
@given(_q, _q, st.floats(-1, 1), st.floats(-1, 1), st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=30, max_size=30), st.booleans())
def test_reward_bookkeeping_and_bounds(q1, q2, x, y, yaw, acts, dead):
    ref = RobotState.from_joints(q1, joint_qd=np.array(q2) * 3)
    robot = RobotState.from_joints(q2, xy=(x, y), yaw=yaw)
    sim = _sim(robot)
    if dead:
        sim = terminate(sim, "position")
    a, p = np.array(acts[:15]), np.array(acts[15:])
    rb = T.tracking_reward(sim, ref, a, p)
    terms = rb.terms()
    expected = 0.0
    for w, t in zip((0.5, 0.3, 0.5, -1.0, -0.1, -0.001, -100.0, -200.0), terms):
        expected = expected + w * t
    assert rb.total == expected
    assert np.all((terms[:3] > 0) & (terms[:3] <= 1))
    assert np.all(T.REWARD_WEIGHTS[3:] * terms[3:] <= 0)
    assert rb.termination == float(dead)


# --- PPO pieces -------------------------------------------------------------


def test_clipped_surrogate_arithmetic():
    r = torch.tensor([2.0, 2.0, 0.5, 1.1])
    a = torch.tensor([1.0, -1.0, -1.0, 1.0])
    out = T.clipped_surrogate(r, a, 0.2)
    np.testing.assert_allclose(out.numpy(), [1.2, -2.0, -0.8, 1.1], rtol=1e-6)


def test_surrogate_flat_outside_clip_band():
    r = torch.tensor([1.5], requires_grad=True)
    T.clipped_surrogate(r, torch.tensor([1.0]), 0.2).sum().backward()
    assert r.grad.item() == 0.0
    r = torch.tensor([0.5], requires_grad=True)
    T.clipped_surrogate(r, torch.tensor([-1.0]), 0.2).sum().backward()
    assert r.grad.item() == 0.0


def test_zero_advantage_flat_surrogate():
    theta = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    x = torch.linspace(-1, 1, 16, dtype=torch.float64)
    dist = torch.distributions.Normal(theta[0] * x[:, None], theta[1].exp().expand(16, 1))
    acts = torch.randn(16, 1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    cfg = T.PPOConfig(value_coef=0.0)
    zero = torch.zeros(16, dtype=torch.float64)
    out = T.ppo_loss(dist, acts, dist.log_prob(acts).sum(-1).detach() + 0.1, zero, zero, zero, cfg)
    (g,) = torch.autograd.grad(out["policy"], theta)
    assert out["policy"].item() == 0.0 and torch.all(g == 0)


def test_ppo_loss_gradient_finite_difference():
    """Two-parameter toy policy: mean = a*x, log std = b."""
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(64, dtype=torch.float64, generator=gen)
    acts = torch.randn(64, 1, dtype=torch.float64, generator=gen)
    adv = torch.randn(64, dtype=torch.float64, generator=gen)
    old = torch.randn(64, dtype=torch.float64, generator=gen) * 0.05 - 1.2
    ret = torch.randn(64, dtype=torch.float64, generator=gen)
    vals = torch.randn(64, dtype=torch.float64, generator=gen)
    cfg = T.PPOConfig(entropy_coef=0.01)

    def loss(th):
        dist = torch.distributions.Normal(th[0] * x[:, None], th[1].exp().expand(64, 1))
        return T.ppo_loss(dist, acts, old, adv, ret, vals, cfg)["total"]

    th = torch.tensor([0.4, -0.1], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(loss(th), th)
    h = 1e-6
    for i in range(2):
        e = torch.zeros(2, dtype=torch.float64)
        e[i] = h
        fd = (loss(th.detach() + e) - loss(th.detach() - e)).item() / (2 * h)
        assert abs(g[i].item() - fd) <= 1e-4 * max(abs(fd), 1e-8)


def test_gae_oracle_and_truncation():
    gamma, lam = 0.9, 0.8
    r = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[0.5], [0.4], [0.3]])
    nv = np.array([[0.4], [0.3], [0.7]])  # last step truncated: bootstrap from V(s_T)
    end = np.array([[False], [False], [True]])
    adv, ret = T.compute_gae(r, v, nv, end, gamma, lam)
    d = r[:, 0] + gamma * nv[:, 0] - v[:, 0]
    a2 = d[2]
    a1 = d[1] + gamma * lam * a2
    a0 = d[0] + gamma * lam * a1
    np.testing.assert_allclose(adv[:, 0], [a0, a1, a2])
    np.testing.assert_allclose(ret, adv + v)
    # an episode boundary stops propagation
    end2 = np.array([[True], [False], [False]])
    adv2, _ = T.compute_gae(r, v, nv, end2, gamma, lam)
    assert adv2[0, 0] == pytest.approx(d[0])


def test_ppo_update_empty_buffer():
    z = np.zeros((0, 1))
    buf = T.RolloutBuffer(np.zeros((0, 1, 78)), np.zeros((0, 1, 15)), z, z, z, z, z.astype(bool))
    with pytest.raises(InvalidArgumentError):
        T.ppo_update(T.TeacherPolicy("reach"), buf, T.PPOConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        T.PPOConfig(clip=0.0)
    with pytest.raises(ConfigError):
        T.PPOConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        T.PPOConfig.from_dict({"clip_ratio": 0.2})
    assert T.PPOConfig().clip == 0.2 and T.PPOConfig().rollout_steps == 2048


def test_policy_output_and_init_std():
    p = T.TeacherPolicy("locomotion")
    assert p.act(np.zeros((3, 78))).shape == (3, 15)
    assert torch.allclose(p.log_std.exp(), torch.full((15,), 0.5))
    with pytest.raises(InvalidArgumentError):
        p.act(np.zeros(77))


def test_zero_residual_replays_reference_joints_and_holds_velocity():
    p = T.TeacherPolicy("locomotion")
    with torch.no_grad():
        p.actor[-1].weight.zero_()
    robot = RobotState.from_joints(np.zeros(12), yaw=0.4, lin_vel_xy=(0.8 * np.cos(0.4), 0.8 * np.sin(0.4)), yaw_rate=-0.6)
    ref_q = np.linspace(-0.2, 0.3, 12)
    obs = T.teacher_observation(_sim(robot), RobotState.from_joints(ref_q))
    a = p.act(obs[None])[0]
    np.testing.assert_allclose(a[:12], ref_q, atol=1e-6)
    # the body-frame velocity of a level robot is its heading-frame command
    np.testing.assert_allclose(a[12:], [0.8, 0.0, -0.6], atol=1e-6)


def test_teacher_groups():
    assert T.teacher_group("nav_around") == "locomotion"
    assert T.teacher_group("sit") == "sit"
    with pytest.raises(ConfigError):
        T.teacher_group("dance")


def test_reward_improved_definition():
    assert T.reward_improved([10.0, 15.0, 25.0])
    assert not T.reward_improved([10.0, 15.0, 18.0])
    assert T.reward_improved([-100.0, -20.0, 5.0])
    assert not T.reward_improved([-100.0, -50.0])


def _refs(n, seed0):
    out = []
    for s in range(n):
        task = D.sample_task("locomotion", np.random.default_rng(seed0 + s), blind=True)
        out.append(D.synthesize_demo(task, seed0 + s, True).traj)
    return out


def test_short_training_deterministic(tmp_path):
    refs = _refs(4, 0)
    cfg = T.PPOConfig(iterations=2, rollout_steps=128, n_envs=8, hidden=(32, 32))
    p1, m1 = T.train_teacher("locomotion", refs, cfg, 3)
    p2, m2 = T.train_teacher("locomotion", refs, cfg, 3)
    np.testing.assert_array_equal(m1.reward_curve, m2.reward_curve)
    for a, b in zip(p1.state_dict().values(), p2.state_dict().values()):
        assert torch.equal(a, b)
    T.save_teacher(tmp_path / "t.npz", p1, cfg)
    back = T.load_teacher(tmp_path / "t.npz")
    obs = np.random.default_rng(0).normal(size=(5, 78))
    np.testing.assert_array_equal(back.act(obs), p1.act(obs))
    assert back.category == "locomotion"


def test_probe_curve_schedule():
    cfg = T.PPOConfig(iterations=5, rollout_steps=64, n_envs=8, hidden=(16,), eval_every=2, eval_refs=2)
    _, m = T.train_teacher("locomotion", _refs(3, 0), cfg, 0)
    assert m.eval_iterations == [0, 2, 4, 5]
    assert len(m.eval_curve) == 4 and len(m.step_reward_curve) == 5
    with pytest.raises(ConfigError):
        T.PPOConfig(eval_every=-1)


def test_untrained_policy_terminates_often():
    res = T.evaluate_teacher(T.TeacherPolicy("locomotion"), _refs(12, 500), deterministic=False)
    assert res.termination_rate > 0.5


def test_empty_reference_set():
    with pytest.raises(ConfigError):
        T.train_teacher("locomotion", [], T.PPOConfig(iterations=1))
