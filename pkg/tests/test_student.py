import numpy as np
import pytest
import torch

from dualproc import datagen as D
from dualproc import student as ST
from dualproc import teacher as T
from dualproc.core import RobotState
from dualproc.errors import ConfigError, IncompatibilityError, InvalidArgumentError, OutOfRangeError
from dualproc.sim import DRParams, reset


def _sim(state):
    return reset(None, state, DRParams.nominal())


# --- observation ----------------------------------------------------------


def test_obs_dimension_and_upright_gravity():
    obs = ST.student_observation(_sim(RobotState.standing(yaw=1.2)))
    assert obs.shape == (48,)
    np.testing.assert_allclose(ST.split_student_obs(obs)["projected_gravity"], [0, 0, -1], atol=1e-12)


def test_obs_layout_has_no_reference_or_history():
    names = [n for n, _ in ST.OBS_LAYOUT]
    assert sum(n for _, n in ST.OBS_LAYOUT) == 48
    assert not any("ref" in n or "hist" in n for n in names)
    # prev_action is the action applied at t-1, i.e. the input of the current state, not a stacked history
    assert names.count("prev_action") == 1


def test_obs_gravity_pitched_forward():
    frame = RobotState.standing().to_flat()
    frame[5] = np.pi / 2  # pitch, nose down
    g = ST.split_student_obs(ST.student_obs_batch(frame, np.zeros(15)))["projected_gravity"]
    # rotation oracle: body x axis points straight down, so gravity lies along +x of the body frame
    R = np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]], dtype=float)  # Ry(+pi/2)
    np.testing.assert_allclose(g, R.T @ np.array([0, 0, -1.0]), atol=1e-12)


def test_obs_body_frame_velocity():
    s = RobotState.standing(yaw=np.pi / 2)
    from dataclasses import replace

    s = replace(s, root_lin_vel=np.array([0.0, 1.0, 0.0]))
    o = ST.split_student_obs(ST.student_observation(_sim(s)))
    np.testing.assert_allclose(o["base_lin_vel"], [1.0, 0.0, 0.0], atol=1e-12)


# --- latent schedule ------------------------------------------------------


def _sched(ticks=4, d=3, sigma=1.0, **kw):
    rng = np.random.default_rng(0)
    return ST.LatentSchedule(rng.normal(size=(ticks, d)), np.full((ticks, d), sigma), **kw)


def test_hold_period_exactly_five_steps():
    sched = _sched()
    rng = np.random.default_rng(1)
    zs = []
    for step in range(20):
        sched, z = ST.advance_schedule(sched, step, rng)
        zs.append(z.copy())
    for w in range(4):
        block = zs[5 * w : 5 * w + 5]
        assert all(np.array_equal(block[0], b) for b in block)
        if w:
            assert not np.array_equal(zs[5 * w], zs[5 * w - 1])


def test_zero_sigma_gives_mean():
    sched = _sched(sigma=0.0)
    _, z = ST.advance_schedule(sched, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(z, sched.mu[0])


def test_eval_mode_uses_mean():
    sched = _sched(use_mean=True)
    rng = np.random.default_rng(0)
    for step in range(0, 20, 5):
        sched, z = ST.advance_schedule(sched, step, rng)
        np.testing.assert_array_equal(z, sched.mu[step // 5])


def test_schedule_out_of_range():
    with pytest.raises(OutOfRangeError):
        ST.advance_schedule(_sched(ticks=2), 10, np.random.default_rng(0))


def test_schedule_monte_carlo():
    mu, sig = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    rng = np.random.default_rng(3)
    n = 10_000
    zs = np.empty((n, 2))
    for i in range(n):
        _, zs[i] = ST.advance_schedule(ST.LatentSchedule(mu[None], sig[None]), 0, rng)
    assert np.all(np.abs(zs.mean(0) - mu) < 3 * sig / np.sqrt(n))
    assert np.all(np.abs(zs.var(0) - sig**2) < 3 * sig**2 * np.sqrt(2 / (n - 1)))


# --- policy -----------------------------------------------------------------


def test_student_forward_shape_and_determinism():
    torch.manual_seed(0)
    p = ST.StudentPolicy(32)
    obs, z = np.random.default_rng(0).normal(size=(4, 48)), np.random.default_rng(1).normal(size=(4, 32))
    a = ST.student_forward(p, obs, z)
    assert a.shape == (4, 15)
    np.testing.assert_array_equal(a, ST.student_forward(p, obs, z))
    with pytest.raises(InvalidArgumentError):
        ST.student_forward(p, obs, z[:, :31])


def test_dropout_only_in_training_mode():
    torch.manual_seed(0)
    p = ST.StudentPolicy(8)
    o, c = torch.randn(64, 48), torch.randn(64, 8)
    p.train()
    assert not torch.equal(p(o, c), p(o, c))
    p.eval()
    assert torch.equal(p(o, c), p(o, c))


def test_two_input_tokens_and_attention_dropout():
    p = ST.StudentPolicy(8)
    assert p.type_embed.shape[0] == 2
    assert all(b.attn.dropout == 0.3 for b in p.blocks) and len(p.blocks) == 2
    assert p.blocks[0].attn.num_heads == 4 and p.blocks[0].attn.embed_dim == 128


def test_huber_values():
    t = torch.zeros(1)
    assert ST.huber(torch.tensor([0.5]), t).item() == pytest.approx(0.125)
    assert ST.huber(torch.tensor([2.0]), t).item() == pytest.approx(1.5)
    assert ST.huber(torch.ones(3), torch.ones(3)).item() == 0.0


def test_smoothed_monotone():
    assert ST.smoothed_monotone([5, 4, 4.2, 3, 2.5, 2.4, 2.6, 2.0, 1.9], window=3)
    assert not ST.smoothed_monotone([1, 2, 3, 4, 5, 6], window=3)


# --- DAgger plumbing --------------------------------------------------------


SMALL = {"vl_trajectories": {}, "blind_trajectories": {"locomotion": 3, "reach": 1}, "blind_variants": 1}


@pytest.fixture(scope="module")
def small_setup():
    ds = D.assemble_mixture(SMALL, 2)
    rng = np.random.default_rng(0)
    cond = ST.Conditioning([rng.normal(size=(r.n_ticks, 4)) for r in ds.records], [np.full((r.n_ticks, 4), 0.1) for r in ds.records])
    torch.manual_seed(0)
    teachers = {g: T.TeacherPolicy(g, hidden=(16,)) for g in ("locomotion", "reach")}
    return ds, cond, teachers


TINY = dict(rounds=2, n_envs=4, steps_per_round=64, d_model=16, ff=16, batch_size=32)


def _record_steps(teachers, cond, ds, **kw):
    seen = []
    ST.distill_dagger(
        teachers, cond, ds, ST.DaggerConfig(**{**TINY, **kw}), 0,
        probe=lambda *a: seen.append(tuple(np.copy(x) for x in a)),
    )
    return seen


def test_dagger_relabels_student_visited_states(small_setup):
    ds, cond, teachers = small_setup
    seen = _record_steps(teachers, cond, ds)
    assert len(seen) == TINY["rounds"] * TINY["steps_per_round"] // TINY["n_envs"]
    # executed actions are the student's, never the expert labels
    assert all(not np.allclose(a, l) for _, _, l, a, _ in seen)
    # each labelled state was reached by executing the previous student action
    chained = 0
    for (_, _, _, a0, done), (_, prev1, _, _, _) in zip(seen[:-1], seen[1:]):
        live = ~done
        np.testing.assert_array_equal(prev1[live], a0[live])
        chained += int(live.sum())
    assert chained > 0


def test_dagger_beta_one_executes_teacher(small_setup):
    ds, cond, teachers = small_setup
    seen = _record_steps(teachers, cond, ds, beta0=1.0, beta_decay=1.0)
    assert all(np.array_equal(a, l) for _, _, l, a, _ in seen)


def test_dagger_deterministic_and_metrics(small_setup):
    ds, cond, teachers = small_setup
    s1, m1 = ST.distill_dagger(teachers, cond, ds, ST.DaggerConfig(**TINY), 5)
    s2, m2 = ST.distill_dagger(teachers, cond, ds, ST.DaggerConfig(**TINY), 5)
    assert m1.loss == m2.loss and len(m1.loss) == 2
    assert m1.buffer_size == [64, 128]
    for a, b in zip(s1.state_dict().values(), s2.state_dict().values()):
        assert torch.equal(a, b)


def test_dagger_missing_inputs(small_setup):
    ds, cond, teachers = small_setup
    with pytest.raises(ConfigError):
        ST.distill_dagger({"locomotion": teachers["locomotion"]}, cond, ds, ST.DaggerConfig(**TINY))
    with pytest.raises(ConfigError):
        ST.distill_dagger(teachers, None, ds, ST.DaggerConfig(**TINY))
    short = ST.Conditioning(cond.mu[:-1], cond.sigma[:-1])
    with pytest.raises(ConfigError):
        ST.distill_dagger(teachers, short, ds, ST.DaggerConfig(**TINY))


def test_mean_only_mode_feeds_mu(small_setup):
    ds, cond, _ = small_setup
    envs = ST.StudentEnvs(ds, cond, 3, 0, sample_latent=False, dr=False, max_steps=50)
    envs.refresh_latents()
    for i in range(3):
        np.testing.assert_array_equal(envs.z[i], cond.mu[envs.rec[i]][envs.k[i] // 5])


def test_batched_latents_hold_for_five_steps(small_setup):
    ds, cond, _ = small_setup
    envs = ST.StudentEnvs(ds, cond, 2, 0, sample_latent=True, dr=False, max_steps=10**6, start="sequential")
    zs = []
    for _ in range(15):
        envs.refresh_latents()
        zs.append(envs.z.copy())
        envs.step(np.zeros((2, 15)) + np.r_[np.zeros(12), 0, 0, 0])
    for w in range(3):
        assert all(np.array_equal(zs[5 * w], zs[5 * w + j]) for j in range(5))
    assert not np.array_equal(zs[4], zs[5])


def test_student_roundtrip(tmp_path):
    torch.manual_seed(0)
    p = ST.StudentPolicy(6, "tokens", d_model=16, ff=16)
    ST.save_student(tmp_path / "s.npz", p, {"s2_checksum": "abc"})
    q, h = ST.load_student(tmp_path / "s.npz", {"s2_checksum": "abc"})
    obs, z = np.ones((2, 48)), np.ones((2, 6))
    np.testing.assert_array_equal(p.act(obs, z), q.act(obs, z))
    assert h["cond_kind"] == "tokens"
    with pytest.raises(IncompatibilityError):
        ST.load_student(tmp_path / "s.npz", {"s2_checksum": "xyz"})


def test_token_conditioning_is_deterministic():
    toks = [np.ones((3, 3, 4))]
    c = ST.conditioning_from_tokens(toks)
    assert c.dim == 12 and c.kind == "tokens" and np.all(c.sigma[0] == 0)
