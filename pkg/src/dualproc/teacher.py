"""Privileged motion-tracking teachers trained with PPO.

A teacher sees proprioception plus the next reference frame and outputs the
15-dim action (12 joint targets and a heading-frame root command). Reward
terms follow the tracking table: three exponential similarity terms and five
penalties. Penalty terms are stored as nonnegative magnitudes and enter the
total through negative weights, so ``total = sum(weight * term)`` exactly.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from dualproc import body
from dualproc.core import (
    FRAME_DIM,
    KinematicTrajectory,
    RobotState,
    _split_frame,
    matrix_from_euler,
    quat_from_euler,
    quat_geodesic_error,
)
from dualproc.errors import ConfigError, IncompatibilityError, InvalidArgumentError
from dualproc.sim import (
    ACTION_DIM,
    POS_TERMINATION,
    ORI_TERMINATION,
    BatchSim,
    DRParams,
    SimState,
    orientation_gap,
    sample_dr,
    world_body_points,
)

OBS_DIM = 78
OBS_LAYOUT = (
    ("base_lin_vel", 3),
    ("base_ang_vel", 3),
    ("joint_q", 12),
    ("joint_qd", 12),
    ("prev_action", 15),
    ("ref_joint_q_next", 12),
    ("ref_joint_qd_next", 12),
    ("rel_ref_torso_pos", 3),
    ("rel_ref_torso_rot6d", 6),
)

REWARD_TERMS = ("torso_pos", "torso_ori", "body_pos", "joint_pos_err", "joint_vel_err", "action_rate", "joint_limit", "termination")
REWARD_WEIGHTS = np.array([0.5, 0.3, 0.5, -1.0, -0.1, -0.001, -100.0, -200.0])
SIGMA2_POS = 0.25
SIGMA2_ORI = 0.5
SIGMA2_BODY = 0.25

# dataset categories handled by each teacher
TEACHER_GROUPS = {
    "locomotion": ("nav_towards", "nav_around", "locomotion"),
    "sit": ("sit",),
    "reach": ("reach",),
}


def teacher_group(category: str) -> str:
    for g, cats in TEACHER_GROUPS.items():
        if category in cats:
            return g
    raise ConfigError(f"no teacher handles category {category!r}")


# ---------------------------------------------------------------------------
# observations


def teacher_obs_batch(frames: np.ndarray, prev_action: np.ndarray, ref_next: np.ndarray) -> np.ndarray:
    """Vectorized observation for flat robot frames (n, 72) and next reference frames (n, 72)."""
    f, r = _split_frame(frames), _split_frame(ref_next)
    e, er = f["euler"], r["euler"]
    R = matrix_from_euler(e[..., 0], e[..., 1], e[..., 2])
    R_ref = matrix_from_euler(er[..., 0], er[..., 1], er[..., 2])
    Rt = np.swapaxes(R, -1, -2)
    lin = np.einsum("...ij,...j->...i", Rt, f["root_lin_vel"])
    rel_pos = np.einsum("...ij,...j->...i", Rt, r["position"] - f["position"])
    rel_R = Rt @ R_ref
    rot6d = np.concatenate([rel_R[..., :, 0], rel_R[..., :, 1]], axis=-1)
    return np.concatenate(
        [lin, f["root_ang_vel"], f["joint_q"], f["joint_qd"], prev_action, r["joint_q"], r["joint_qd"], rel_pos, rot6d],
        axis=-1,
    )


def teacher_observation(sim: SimState, ref_next: RobotState) -> np.ndarray:
    """78-dim privileged observation; relative torso terms are in the robot's torso frame."""
    return teacher_obs_batch(sim.robot.to_flat(), np.asarray(sim.prev_action, dtype=float), ref_next.to_flat())


def _obs_slice(name: str) -> slice:
    i = 0
    for n, k in OBS_LAYOUT:
        if n == name:
            return slice(i, i + k)
        i += k
    raise KeyError(name)


REF_Q_SLICE = _obs_slice("ref_joint_q_next")
BASE_LIN_SLICE = _obs_slice("base_lin_vel")
BASE_ANG_SLICE = _obs_slice("base_ang_vel")


def split_obs(obs: np.ndarray) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for name, n in OBS_LAYOUT:
        out[name] = obs[..., i : i + n]
        i += n
    return out


# ---------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class RewardBreakdown:
    torso_pos: float
    torso_ori: float
    body_pos: float
    joint_pos_err: float
    joint_vel_err: float
    action_rate: float
    joint_limit: float
    termination: float
    total: float

    def terms(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in REWARD_TERMS])


def reward_terms_batch(
    frames: np.ndarray,
    ref: np.ndarray,
    action: np.ndarray,
    prev_action: np.ndarray,
    terminated: np.ndarray,
    body_sum: bool = True,
) -> np.ndarray:
    """(n, 8) reward terms in REWARD_TERMS order."""
    f, r = _split_frame(frames), _split_frame(ref)
    dp = np.sum((r["position"] - f["position"]) ** 2, axis=-1)
    e, er = f["euler"], r["euler"]
    q_err = quat_geodesic_error(
        quat_from_euler(e[..., 0], e[..., 1], e[..., 2]), quat_from_euler(er[..., 0], er[..., 1], er[..., 2]), check=False
    )
    pts_err = np.sum((world_body_points(ref) - world_body_points(frames)) ** 2, axis=-1)
    body_err = pts_err.sum(axis=-1) if body_sum else pts_err.mean(axis=-1)
    terms = np.stack(
        [
            np.exp(-dp / SIGMA2_POS),
            np.exp(-(q_err**2) / SIGMA2_ORI),
            np.exp(-body_err / SIGMA2_BODY),
            np.linalg.norm(r["joint_q"] - f["joint_q"], axis=-1),
            np.linalg.norm(r["joint_qd"] - f["joint_qd"], axis=-1),
            np.sum((np.asarray(action) - np.asarray(prev_action)) ** 2, axis=-1),
            body.outside_soft_limits(f["joint_q"]).astype(float),
            np.asarray(terminated, dtype=float) * np.ones_like(dp),
        ],
        axis=-1,
    )
    return terms


def weighted_total(terms: np.ndarray) -> np.ndarray:
    # explicit left-to-right sum so totals are reproducible term by term
    total = np.zeros(terms.shape[:-1])
    for i, w in enumerate(REWARD_WEIGHTS):
        total = total + w * terms[..., i]
    return total


def tracking_reward(sim: SimState, ref: RobotState, action, prev_action, body_sum: bool = True) -> RewardBreakdown:
    terms = reward_terms_batch(
        sim.robot.to_flat(), ref.to_flat(), np.asarray(action, float), np.asarray(prev_action, float), sim.terminated, body_sum
    )
    return RewardBreakdown(*(float(t) for t in terms), total=float(weighted_total(terms)))


# ---------------------------------------------------------------------------
# policy


def _mlp(d_in: int, hidden: Sequence[int], d_out: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for h in hidden:
        layers += [nn.Linear(d_in, h), nn.ELU()]
        d_in = h
    layers.append(nn.Linear(d_in, d_out))
    return nn.Sequential(*layers)


class RunningNorm(nn.Module):
    """Observation standardizer with running moments (frozen outside rollouts)."""

    def __init__(self, dim: int, clip: float = 10.0):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.tensor(1e-4, dtype=torch.float64))
        self.clip = clip

    def update(self, x: np.ndarray) -> None:
        x = torch.as_tensor(x, dtype=torch.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        bm, bv = x.mean(0), x.var(0, unbiased=False)
        tot = self.count + n
        delta = bm - self.mean
        self.mean += delta * n / tot
        self.var.copy_((self.var * self.count + bv * n + delta**2 * self.count * n / tot) / tot)
        self.count.copy_(tot)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = (x - self.mean.to(x.dtype)) / torch.sqrt(self.var.to(x.dtype) + 1e-8)
        return torch.clamp(y, -self.clip, self.clip)


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    rollout_steps: int = 2048
    n_envs: int = 32
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    iterations: int = 150
    init_std: float = 0.5
    max_episode_steps: int = 250
    hidden: tuple = (512, 256, 128)
    body_sum: bool = True
    domain_randomization: bool = True
    scale_rewards: bool = True
    eval_every: int = 25  # iterations between deterministic probe evaluations (0 disables)
    eval_refs: int = 16

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigError("PPO clip must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        if self.rollout_steps % self.n_envs:
            raise ConfigError("rollout_steps must be a multiple of n_envs")
        if self.eval_every < 0 or self.eval_refs < 1:
            raise ConfigError("eval_every must be >= 0 and eval_refs >= 1")
        self.hidden = tuple(self.hidden)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "PPOConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown teacher config keys: {sorted(unknown)}")
        return cls(**d)


class TeacherPolicy(nn.Module):
    def __init__(self, category: str, hidden: Sequence[int] = (512, 256, 128), init_std: float = 0.5):
        super().__init__()
        if category not in TEACHER_GROUPS:
            raise ConfigError(f"unknown teacher category {category!r}")
        self.category = category
        self.hidden = tuple(hidden)
        self.obs_norm = RunningNorm(OBS_DIM)
        self.actor = _mlp(OBS_DIM, hidden, ACTION_DIM)
        self.critic = _mlp(OBS_DIM, hidden, 1)
        self.log_std = nn.Parameter(torch.full((ACTION_DIM,), float(np.log(init_std))))
        with torch.no_grad():
            self.actor[-1].weight.mul_(0.01)
            self.actor[-1].bias.zero_()

    @staticmethod
    def action_offset(obs: torch.Tensor) -> torch.Tensor:
        """Joint targets are residuals on the next reference pose; root commands are
        residuals on the current planar velocity and yaw rate, so a zero output holds speed."""
        lin, ang = obs[..., BASE_LIN_SLICE], obs[..., BASE_ANG_SLICE]
        return torch.cat([obs[..., REF_Q_SLICE], lin[..., :2], ang[..., 2:3]], dim=-1)

    def mean_action(self, obs: torch.Tensor) -> torch.Tensor:
        return self.actor(self.obs_norm(obs)) + self.action_offset(obs)

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Normal:
        mean = self.mean_action(obs)
        return torch.distributions.Normal(mean, self.log_std.exp().expand_as(mean))

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(self.obs_norm(obs)).squeeze(-1)

    @torch.no_grad()
    def act(self, obs: np.ndarray, deterministic: bool = True, generator: Optional[torch.Generator] = None) -> np.ndarray:
        o = torch.as_tensor(np.asarray(obs, dtype=np.float32))
        if o.shape[-1] != OBS_DIM:
            raise InvalidArgumentError(f"teacher observation must have {OBS_DIM} entries")
        mean = self.mean_action(o)
        if deterministic:
            return mean.double().numpy()
        noise = torch.randn(mean.shape, generator=generator)
        return (mean + self.log_std.exp() * noise).double().numpy()


# ---------------------------------------------------------------------------
# PPO


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, n, 78)
    actions: np.ndarray  # (T, n, 15)
    logp: np.ndarray  # (T, n)
    values: np.ndarray  # (T, n)
    rewards: np.ndarray  # (T, n)
    next_values: np.ndarray  # (T, n) value of the successor state, 0 when terminated
    episode_end: np.ndarray  # (T, n) bool, terminated or truncated

    def __len__(self) -> int:
        return int(self.rewards.size)


def compute_gae(rewards, values, next_values, episode_end, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates with truncation-aware bootstrapping."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=float)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        last = delta + gamma * lam * (1.0 - episode_end[t]) * last
        adv[t] = last
    return adv, adv + values


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Per-sample PPO objective (to be maximized)."""
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_loss(dist, actions, old_logp, adv, returns, values_pred, cfg: PPOConfig) -> dict[str, torch.Tensor]:
    logp = dist.log_prob(actions).sum(-1)
    ratio = torch.exp(logp - old_logp)
    pg = -clipped_surrogate(ratio, adv, cfg.clip).mean()
    v = 0.5 * ((values_pred - returns) ** 2).mean()
    ent = dist.entropy().sum(-1).mean()
    total = pg + cfg.value_coef * v - cfg.entropy_coef * ent
    return {"total": total, "policy": pg, "value": v, "entropy": ent, "clip_frac": ((ratio - 1).abs() > cfg.clip).float().mean()}


def ppo_update(policy: TeacherPolicy, buffer: RolloutBuffer, cfg: PPOConfig, optimizer=None, rng=None) -> dict:
    if buffer is None or len(buffer) == 0:
        raise InvalidArgumentError("PPO update needs a non-empty rollout buffer")
    optimizer = optimizer or torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    rng = rng or np.random.default_rng(0)
    adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.next_values, buffer.episode_end, cfg.gamma, cfg.gae_lambda)
    n = len(buffer)
    obs = torch.as_tensor(buffer.obs.reshape(n, -1), dtype=torch.float32)
    act = torch.as_tensor(buffer.actions.reshape(n, -1), dtype=torch.float32)
    old = torch.as_tensor(buffer.logp.reshape(n), dtype=torch.float32)
    adv_t = torch.as_tensor(adv.reshape(n), dtype=torch.float32)
    ret_t = torch.as_tensor(ret.reshape(n), dtype=torch.float32)
    mb = max(1, n // cfg.minibatches)
    stats: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, mb):
            idx = torch.as_tensor(perm[s : s + mb])
            a = adv_t[idx]
            if len(idx) > 1:
                a = (a - a.mean()) / (a.std() + 1e-8)
            out = ppo_loss(policy.distribution(obs[idx]), act[idx], old[idx], a, ret_t[idx], policy.value(obs[idx]), cfg)
            optimizer.zero_grad(set_to_none=True)
            out["total"].backward()
            nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in out.items():
                stats[k] = stats.get(k, 0.0) + float(v.detach())
            count += 1
    return {k: v / count for k, v in stats.items()}


# ---------------------------------------------------------------------------
# episodes over reference trajectories


class TrackingEnvs:
    """Batched reference-tracking episodes with auto-reset.

    Each environment follows one reference trajectory from a random start
    frame. The episode ends on early termination (position or orientation
    gap) or when the reference runs out / the step cap is hit (truncation).
    """

    def __init__(self, trajectories: Sequence[KinematicTrajectory], n: int, seed: int, cfg: PPOConfig, start_frame: Optional[str] = "random"):
        if not trajectories:
            raise ConfigError("teacher training needs at least one reference trajectory")
        self.trajs = [t for t in trajectories if len(t) >= 3]
        if not self.trajs:
            raise ConfigError("reference trajectories are too short")
        self.n = n
        self.cfg = cfg
        self.lengths = np.array([len(t) for t in self.trajs])
        self.ref_data = np.zeros((len(self.trajs), self.lengths.max(), FRAME_DIM))
        for j, t in enumerate(self.trajs):
            self.ref_data[j, : len(t)] = t.data
            self.ref_data[j, len(t) :] = t.data[-1]
        self.rng = np.random.default_rng([seed, 41])
        self.sim = BatchSim(n)
        self.start_frame = start_frame
        self.traj_idx = np.zeros(n, dtype=int)
        self.k = np.zeros(n, dtype=int)
        self.steps = np.zeros(n, dtype=int)
        self.ep_return = np.zeros(n)
        self.pos_err_sum = np.zeros(n)
        for i in range(n):
            self._reset(i)

    def _reset(self, i: int) -> None:
        j = int(self.rng.integers(len(self.trajs)))
        tr = self.trajs[j]
        k = int(self.rng.integers(0, len(tr) - 2)) if self.start_frame == "random" else 0
        dr = sample_dr(self.rng.integers(2**63)) if self.cfg.domain_randomization else DRParams.nominal()
        self.sim.reset(i, tr.frame(k), dr)
        self.traj_idx[i], self.k[i], self.steps[i] = j, k, 0
        self.ep_return[i] = 0.0
        self.pos_err_sum[i] = 0.0

    def refs(self, offset: int) -> np.ndarray:
        k = np.minimum(self.k + offset, self.lengths[self.traj_idx] - 1)
        return self.ref_data[self.traj_idx, k]

    def obs(self) -> np.ndarray:
        return teacher_obs_batch(self.sim.frames, self.sim.prev_action, self.refs(1))

    def step(self, actions: np.ndarray):
        """Advance all envs; returns (rewards, terminated, truncated, obs_after, info) before auto-reset."""
        prev = self.sim.prev_action.copy()
        ref = self.refs(1)
        self.sim.step(actions)
        self.k += 1
        self.steps += 1
        gap = np.linalg.norm(ref[:, :3] - self.sim.position, axis=1)
        ori = orientation_gap(self.sim.euler, ref[:, 3:6])
        terminated = (gap > POS_TERMINATION) | (ori > ORI_TERMINATION)
        reason = np.where(gap > POS_TERMINATION, "position", np.where(ori > ORI_TERMINATION, "orientation", ""))
        terms = reward_terms_batch(self.sim.frames, ref, actions, prev, terminated, self.cfg.body_sum)
        rewards = weighted_total(terms)
        lens = self.lengths[self.traj_idx]
        truncated = ~terminated & ((self.k >= lens - 1) | (self.steps >= self.cfg.max_episode_steps))
        self.ep_return += rewards
        self.pos_err_sum += gap
        obs_after = teacher_obs_batch(self.sim.frames, self.sim.prev_action, self.refs(1))
        info = {
            "return": self.ep_return.copy(),
            "steps": self.steps.copy(),
            "pos_err": self.pos_err_sum / np.maximum(self.steps, 1),
            "reason": reason,
        }
        return rewards, terminated, truncated, obs_after, info

    def reset_done(self, done: np.ndarray) -> None:
        for i in np.flatnonzero(done):
            self._reset(i)


@dataclass
class TeacherMetrics:
    reward_curve: list[float] = field(default_factory=list)  # mean completed-episode return per iteration
    step_reward_curve: list[float] = field(default_factory=list)  # mean raw reward per env step per iteration
    eval_iterations: list[int] = field(default_factory=list)
    eval_curve: list[float] = field(default_factory=list)  # deterministic mean return on fixed training references
    termination_curve: list[float] = field(default_factory=list)
    updates: list[dict] = field(default_factory=list)
    wall_time: float = 0.0


class ReturnScaler:
    """Divides rewards by the running std of the discounted return (training only)."""

    def __init__(self, n: int, gamma: float):
        self.ret = np.zeros(n)
        self.gamma = gamma
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def __call__(self, r: np.ndarray, done: np.ndarray) -> np.ndarray:
        self.ret = self.ret * self.gamma + r
        for x in self.ret:
            self.count += 1
            d = x - self.mean
            self.mean += d / self.count
            self.m2 += d * (x - self.mean)
        self.ret[done] = 0.0
        std = np.sqrt(self.m2 / self.count) if self.count > 1 else 1.0
        return r / max(std, 1e-8)


def collect_rollout(policy: TeacherPolicy, envs: TrackingEnvs, steps: int, gen: torch.Generator, scaler: Optional[ReturnScaler] = None):
    T = steps // envs.n
    n = envs.n
    buf = RolloutBuffer(
        np.zeros((T, n, OBS_DIM), np.float32),
        np.zeros((T, n, ACTION_DIM), np.float32),
        np.zeros((T, n)),
        np.zeros((T, n)),
        np.zeros((T, n)),
        np.zeros((T, n)),
        np.zeros((T, n), bool),
    )
    returns, terms = [], []
    raw = np.zeros((T, n))
    obs = envs.obs()
    for t in range(T):
        policy.obs_norm.update(obs)
        o = torch.as_tensor(obs, dtype=torch.float32)
        with torch.no_grad():
            dist = policy.distribution(o)
            a = dist.mean + dist.stddev * torch.randn(dist.mean.shape, generator=gen)
            logp = dist.log_prob(a).sum(-1)
            v = policy.value(o)
        act = a.double().numpy()
        r, term, trunc, obs_after, info = envs.step(act)
        with torch.no_grad():
            v_next = policy.value(torch.as_tensor(obs_after, dtype=torch.float32)).double().numpy()
        done = term | trunc
        buf.obs[t], buf.actions[t] = obs, a.numpy()
        buf.logp[t], buf.values[t] = logp.numpy(), v.numpy()
        raw[t] = r
        buf.rewards[t] = scaler(r, done) if scaler is not None else r
        buf.next_values[t] = np.where(term, 0.0, v_next)
        buf.episode_end[t] = done
        for i in np.flatnonzero(done):
            returns.append(info["return"][i])
            terms.append(bool(term[i]))
        envs.reset_done(done)
        obs = envs.obs()
    return buf, returns, terms, float(raw.mean())


def train_teacher(
    category: str,
    trajectories: Sequence[KinematicTrajectory],
    cfg: Optional[PPOConfig] = None,
    seed: int = 0,
    log: Optional[Callable[[dict], None]] = None,
) -> tuple[TeacherPolicy, TeacherMetrics]:
    cfg = cfg or PPOConfig()
    torch.manual_seed(seed)
    policy = TeacherPolicy(category, cfg.hidden, cfg.init_std)
    envs = TrackingEnvs(trajectories, cfg.n_envs, seed, cfg)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 7])
    metrics = TeacherMetrics()
    scaler = ReturnScaler(cfg.n_envs, cfg.gamma) if cfg.scale_rewards else None
    probe = list(envs.trajs[:: max(1, len(envs.trajs) // cfg.eval_refs)][: cfg.eval_refs])
    t0 = time.perf_counter()
    last_mean = float("nan")

    def probe_eval(it: int) -> None:
        metrics.eval_iterations.append(it)
        metrics.eval_curve.append(evaluate_teacher(policy, probe, seed).mean_return)

    for it in range(cfg.iterations):
        if cfg.eval_every and it % cfg.eval_every == 0:
            probe_eval(it)
        buf, returns, terms, step_reward = collect_rollout(policy, envs, cfg.rollout_steps, gen, scaler)
        stats = ppo_update(policy, buf, cfg, opt, rng)
        if returns:
            last_mean = float(np.mean(returns))
        metrics.reward_curve.append(last_mean)
        metrics.step_reward_curve.append(step_reward)
        metrics.termination_curve.append(float(np.mean(terms)) if terms else float("nan"))
        metrics.updates.append(stats)
        if log is not None:
            log({"iteration": it, "mean_return": last_mean, "step_reward": step_reward, "termination_rate": metrics.termination_curve[-1], **stats})
    if cfg.eval_every and cfg.iterations:
        probe_eval(cfg.iterations)
    metrics.wall_time = time.perf_counter() - t0
    policy.eval()
    return policy, metrics


def reward_improved(curve: Sequence[float], factor: float = 2.0) -> bool:
    """Improvement of at least ``factor`` relative to the first iteration.

    Returns are signed; "factor x better" is read as final - initial >=
    (factor - 1) * |initial|, which coincides with final >= factor * initial
    when the initial value is positive.
    """
    vals = [c for c in curve if np.isfinite(c)]
    if len(vals) < 2:
        return False
    first, final = vals[0], float(np.mean(vals[-max(1, len(vals) // 10) :]))
    return final - first >= (factor - 1.0) * abs(first)


@dataclass
class TrackingEval:
    termination_rate: float
    mean_pos_err: float
    mean_return: float
    episodes: int


def evaluate_teacher(
    policy: TeacherPolicy,
    trajectories: Sequence[KinematicTrajectory],
    seed: int = 0,
    deterministic: bool = True,
    domain_randomization: bool = False,
    max_episode_steps: int = 400,
) -> TrackingEval:
    """One episode per reference from its first frame; nominal dynamics by default."""
    cfg = PPOConfig(n_envs=1, rollout_steps=1, domain_randomization=domain_randomization, max_episode_steps=max_episode_steps)
    envs = TrackingEnvs(trajectories, len(trajectories), seed, cfg, start_frame="first")
    # pin env i to reference i
    for i in range(len(envs.trajs)):
        dr = sample_dr([seed, i]) if domain_randomization else DRParams.nominal()
        envs.sim.reset(i, envs.trajs[i].frame(0), dr)
        envs.traj_idx[i], envs.k[i], envs.steps[i] = i, 0, 0
    envs.ep_return[:] = 0
    envs.pos_err_sum[:] = 0
    gen = torch.Generator().manual_seed(seed)
    alive = np.ones(envs.n, bool)
    terminated = np.zeros(envs.n, bool)
    ret = np.zeros(envs.n)
    err = np.zeros(envs.n)
    while alive.any():
        a = policy.act(envs.obs(), deterministic, gen)
        _, term, trunc, _, info = envs.step(a)
        newly = alive & (term | trunc)
        terminated |= newly & term
        ret[newly] = info["return"][newly]
        err[newly] = info["pos_err"][newly]
        alive &= ~newly
        # finished envs keep stepping harmlessly; their results are frozen
    return TrackingEval(float(terminated.mean()), float(err.mean()), float(ret.mean()), envs.n)


# ---------------------------------------------------------------------------
# persistence


def save_teacher(path, policy: TeacherPolicy, cfg: Optional[PPOConfig] = None) -> None:
    buf = io.BytesIO()
    torch.save(policy.state_dict(), buf)
    header = {"category": policy.category, "hidden": list(policy.hidden), "config": asdict(cfg) if cfg else None}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), state=np.frombuffer(buf.getvalue(), dtype=np.uint8))


def load_teacher(path) -> TeacherPolicy:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            h = json.loads(str(z["header"]))
            state = torch.load(io.BytesIO(z["state"].tobytes()), weights_only=True)
    except (KeyError, ValueError) as exc:
        raise IncompatibilityError(f"{path} is not a teacher policy file") from exc
    policy = TeacherPolicy(h["category"], h["hidden"])
    policy.load_state_dict(state)
    policy.eval()
    return policy
