"""Proprioceptive transformer student distilled from the teachers with DAgger.

The student sees 48 proprioceptive values and one conditioning vector: a
latent verb from the frozen System-2 cache, or (for the no-latent ablation)
the flattened perception tokens. Latents are refreshed every ``H`` = 5 low
level steps, one System-2 tick, and held constant in between.

Distillation rolls the student itself in the simulator; the teacher for the
record's category relabels every visited state from the matching reference
frame, and the aggregated buffer is fit with a Huber loss.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from dualproc.core import DEFAULT_STRIDE, FRAME_DIM, _split_frame, gravity_in_body, matrix_from_euler
from dualproc.errors import ConfigError, IncompatibilityError, InvalidArgumentError, OutOfRangeError
from dualproc.sim import (
    ACTION_DIM,
    ORI_TERMINATION,
    POS_TERMINATION,
    BatchSim,
    DRParams,
    SimState,
    orientation_gap,
    sample_dr,
)
from dualproc.teacher import RunningNorm, TeacherPolicy, teacher_group, teacher_obs_batch

OBS_DIM = 48
OBS_LAYOUT = (
    ("base_lin_vel", 3),
    ("base_ang_vel", 3),
    ("prev_action", 15),
    ("joint_q", 12),
    ("joint_qd", 12),
    ("projected_gravity", 3),
)
HOLD_STEPS = DEFAULT_STRIDE


def student_obs_batch(frames: np.ndarray, prev_action: np.ndarray) -> np.ndarray:
    f = _split_frame(np.asarray(frames, dtype=float))
    e = f["euler"]
    R = matrix_from_euler(e[..., 0], e[..., 1], e[..., 2])
    lin = np.einsum("...ji,...j->...i", R, f["root_lin_vel"])
    grav = gravity_in_body(e[..., 0], e[..., 1], e[..., 2])
    return np.concatenate([lin, f["root_ang_vel"], prev_action, f["joint_q"], f["joint_qd"], grav], axis=-1)


def student_observation(sim: SimState) -> np.ndarray:
    """48 values of the current step only; no reference and no history."""
    return student_obs_batch(sim.robot.to_flat(), np.asarray(sim.prev_action, dtype=float))


def split_student_obs(obs: np.ndarray) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for name, n in OBS_LAYOUT:
        out[name] = obs[..., i : i + n]
        i += n
    return out


# ---------------------------------------------------------------------------
# latent schedule


@dataclass(frozen=True)
class LatentSchedule:
    mu: np.ndarray  # (ticks, d)
    sigma: np.ndarray  # (ticks, d)
    H: int = HOLD_STEPS
    z: Optional[np.ndarray] = None
    last_resample: int = -1
    use_mean: bool = False  # deployment conditioning on the prior mean

    @property
    def ticks(self) -> int:
        return len(self.mu)


def advance_schedule(sched: LatentSchedule, step: int, rng: np.random.Generator) -> tuple[LatentSchedule, np.ndarray]:
    """Resample z at step 0 and every H steps after the last draw; otherwise hold it."""
    tick = step // DEFAULT_STRIDE
    if step < 0 or tick >= sched.ticks:
        raise OutOfRangeError(f"step {step} is beyond the {sched.ticks}-tick latent cache")
    if sched.z is not None and step - sched.last_resample < sched.H:
        return sched, sched.z
    mu, sigma = sched.mu[tick], sched.sigma[tick]
    z = mu.copy() if sched.use_mean else mu + sigma * rng.standard_normal(mu.shape)
    return replace(sched, z=z, last_resample=step), z


@dataclass
class Conditioning:
    """Per-record conditioning sequences: cached latents or flattened tokens."""

    mu: list[np.ndarray]
    sigma: list[np.ndarray]
    kind: str = "latent"
    source_checksum: str = ""

    @property
    def dim(self) -> int:
        return int(self.mu[0].shape[1]) if self.mu else 0

    def __len__(self) -> int:
        return len(self.mu)

    def schedule(self, record: int, start_tick: int = 0, use_mean: bool = False) -> LatentSchedule:
        return LatentSchedule(self.mu[record][start_tick:], self.sigma[record][start_tick:], use_mean=use_mean)


def conditioning_from_cache(cache) -> Conditioning:
    return Conditioning(list(cache.mu), list(cache.sigma), "latent", cache.model_checksum)


def conditioning_from_tokens(tokens: Sequence[np.ndarray], perception_checksum: str = "") -> Conditioning:
    flat = [np.asarray(t, dtype=float).reshape(len(t), -1) for t in tokens]
    return Conditioning(flat, [np.zeros_like(f) for f in flat], "tokens", perception_checksum)


# ---------------------------------------------------------------------------
# policy


class _Block(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, attn_dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=attn_dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ELU(), nn.Linear(ff, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.ln2(x))


class StudentPolicy(nn.Module):
    def __init__(
        self,
        cond_dim: int = 32,
        cond_kind: str = "latent",
        d_model: int = 128,
        heads: int = 4,
        layers: int = 2,
        ff: int = 256,
        attn_dropout: float = 0.3,
    ):
        super().__init__()
        self.cond_dim, self.cond_kind = int(cond_dim), cond_kind
        # checksum of whatever produced the conditioning (System-2 model or perception encoders)
        self.source_checksum = ""
        self.arch = dict(d_model=d_model, heads=heads, layers=layers, ff=ff, attn_dropout=attn_dropout)
        self.obs_norm = RunningNorm(OBS_DIM)
        self.obs_embed = nn.Linear(OBS_DIM, d_model)
        self.cond_embed = nn.Linear(self.cond_dim, d_model)
        self.type_embed = nn.Parameter(torch.randn(2, d_model) * 0.02)
        self.blocks = nn.ModuleList(_Block(d_model, heads, ff, attn_dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, ACTION_DIM)
        self.register_buffer("act_mean", torch.zeros(ACTION_DIM, dtype=torch.float64))
        self.register_buffer("act_std", torch.ones(ACTION_DIM, dtype=torch.float64))

    def forward(self, obs: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != OBS_DIM or cond.shape[-1] != self.cond_dim:
            raise InvalidArgumentError(f"student expects ({OBS_DIM},) obs and ({self.cond_dim},) conditioning")
        tokens = torch.stack([self.obs_embed(self.obs_norm(obs)), self.cond_embed(cond)], dim=-2) + self.type_embed
        for b in self.blocks:
            tokens = b(tokens)
        out = self.head(self.norm(tokens.mean(dim=-2)))
        return out * self.act_std.to(out.dtype) + self.act_mean.to(out.dtype)

    @torch.no_grad()
    def act(self, obs: np.ndarray, cond: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            o = torch.as_tensor(np.asarray(obs, dtype=np.float32))
            c = torch.as_tensor(np.asarray(cond, dtype=np.float32))
            return self(o, c).double().numpy()
        finally:
            self.train(was)


def student_forward(policy: StudentPolicy, obs, z) -> np.ndarray:
    return policy.act(obs, z)


def huber(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    return F.huber_loss(pred, target, delta=delta)


# ---------------------------------------------------------------------------
# DAgger


@dataclass
class DaggerConfig:
    rounds: int = 40
    n_envs: int = 64
    steps_per_round: int = 2048
    epochs_per_round: int = 2
    batch_size: int = 512
    lr: float = 1e-3
    huber_delta: float = 1.0
    buffer_cap: int = 200_000
    beta0: float = 0.0  # probability of executing the teacher action; 0 = pure student rollouts
    beta_decay: float = 0.5
    sample_latent: bool = True  # False reproduces the mean-only (NLS) ablation
    max_episode_steps: int = 300
    domain_randomization: bool = True
    d_model: int = 128
    heads: int = 4
    layers: int = 2
    ff: int = 256
    attn_dropout: float = 0.3

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "DaggerConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown distillation config keys: {sorted(unknown)}")
        return cls(**d)

    def beta(self, round_idx: int) -> float:
        return float(self.beta0 * self.beta_decay**round_idx)


@dataclass
class DaggerMetrics:
    loss: list[float] = field(default_factory=list)  # mean Huber loss of the last epoch in each round
    termination_rate: list[float] = field(default_factory=list)
    buffer_size: list[int] = field(default_factory=list)
    wall_time: float = 0.0


class _Buffer:
    def __init__(self, cap: int, cond_dim: int):
        self.cap = cap
        self.obs = np.zeros((0, OBS_DIM), np.float32)
        self.cond = np.zeros((0, cond_dim), np.float32)
        self.act = np.zeros((0, ACTION_DIM), np.float32)

    def add(self, obs, cond, act) -> None:
        self.obs = np.concatenate([self.obs, obs])[-self.cap :]
        self.cond = np.concatenate([self.cond, cond])[-self.cap :]
        self.act = np.concatenate([self.act, act])[-self.cap :]

    def __len__(self) -> int:
        return len(self.act)


class StudentEnvs:
    """Batched student rollouts over dataset records with reference-based termination."""

    def __init__(self, dataset, cond: Conditioning, n: int, seed: int, sample_latent: bool, dr: bool, max_steps: int,
                 records: Optional[Sequence[int]] = None, start: str = "random"):
        self.records = list(range(len(dataset.records))) if records is None else list(records)
        if not self.records:
            raise ConfigError("no records to roll out")
        self.trajs = [dataset.records[i].traj for i in range(len(dataset.records))]
        self.groups = [teacher_group(r.task.category) for r in dataset.records]
        self.cond = cond
        self.n = n
        self.rng = np.random.default_rng([seed, 23])
        self.sample_latent = sample_latent
        self.dr = dr
        self.max_steps = max_steps
        self.start = start
        self.sim = BatchSim(n)
        self.rec = np.zeros(n, int)
        self.k0 = np.zeros(n, int)
        self.k = np.zeros(n, int)
        self.limit = np.zeros(n, int)
        self.steps = np.zeros(n, int)
        self.z = np.zeros((n, cond.dim))
        self._next = 0
        for i in range(n):
            self.reset_env(i)

    def reset_env(self, i: int, record: Optional[int] = None) -> None:
        if record is None:
            if self.start == "sequential":
                record = self.records[self._next % len(self.records)]
                self._next += 1
            else:
                record = self.records[int(self.rng.integers(len(self.records)))]
        traj = self.trajs[record]
        ticks = len(self.cond.mu[record])
        limit = min(len(traj) - 1, DEFAULT_STRIDE * ticks - 1)
        k0 = 0 if self.start != "random" else int(self.rng.integers(0, max(1, limit // DEFAULT_STRIDE))) * DEFAULT_STRIDE
        dr = sample_dr(self.rng.integers(2**63)) if self.dr else DRParams.nominal()
        self.sim.reset(i, traj.frame(k0), dr)
        self.rec[i], self.k0[i], self.k[i], self.limit[i], self.steps[i] = record, k0, k0, limit, 0

    def refresh_latents(self) -> None:
        due = self.steps % HOLD_STEPS == 0
        for i in np.flatnonzero(due):
            tick = self.k[i] // DEFAULT_STRIDE
            mu, sig = self.cond.mu[self.rec[i]][tick], self.cond.sigma[self.rec[i]][tick]
            self.z[i] = mu + sig * self.rng.standard_normal(mu.shape) if self.sample_latent else mu

    def ref(self, offset: int) -> np.ndarray:
        out = np.empty((self.n, FRAME_DIM))
        for i in range(self.n):
            d = self.trajs[self.rec[i]].data
            out[i] = d[min(self.k[i] + offset, len(d) - 1)]
        return out

    def obs(self) -> np.ndarray:
        return student_obs_batch(self.sim.frames, self.sim.prev_action)

    def step(self, actions: np.ndarray):
        ref = self.ref(1)
        self.sim.step(actions)
        self.k += 1
        self.steps += 1
        gap = np.linalg.norm(ref[:, :3] - self.sim.position, axis=1)
        ori = orientation_gap(self.sim.euler, ref[:, 3:6])
        terminated = (gap > POS_TERMINATION) | (ori > ORI_TERMINATION)
        truncated = ~terminated & ((self.k >= self.limit) | (self.steps >= self.max_steps))
        return terminated, truncated


def teacher_actions(teachers: dict, groups: Sequence[str], frames, prev_action, ref_next) -> np.ndarray:
    """Expert labels for the states actually visited, per-category teacher."""
    obs = teacher_obs_batch(frames, prev_action, ref_next)
    out = np.zeros((len(groups), ACTION_DIM))
    groups = np.asarray(groups)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        out[idx] = teachers[g].act(obs[idx])
    return out


def _check_inputs(teachers, cond, dataset):
    if cond is None or len(cond) != len(dataset.records):
        raise ConfigError("conditioning cache is missing or does not cover every training record")
    for r, m in zip(dataset.records, cond.mu):
        if len(m) != r.n_ticks:
            raise ConfigError("conditioning cache tick counts do not match the dataset")
    needed = {teacher_group(r.task.category) for r in dataset.records}
    missing = needed - set(teachers or {})
    if missing:
        raise ConfigError(f"missing teachers for {sorted(missing)}")


def distill_dagger(
    teachers: dict[str, TeacherPolicy],
    cond: Conditioning,
    dataset,
    cfg: Optional[DaggerConfig] = None,
    seed: int = 0,
    log: Optional[Callable[[dict], None]] = None,
    probe: Optional[Callable[..., None]] = None,
) -> tuple[StudentPolicy, DaggerMetrics]:
    """``probe(frames, prev_action, labels, executed, done)`` is an optional per-step instrumentation hook."""
    cfg = cfg or DaggerConfig()
    _check_inputs(teachers, cond, dataset)
    torch.manual_seed(seed)
    student = StudentPolicy(cond.dim, cond.kind, cfg.d_model, cfg.heads, cfg.layers, cfg.ff, cfg.attn_dropout)
    student.source_checksum = cond.source_checksum
    envs = StudentEnvs(dataset, cond, cfg.n_envs, seed, cfg.sample_latent, cfg.domain_randomization, cfg.max_episode_steps)
    buf = _Buffer(cfg.buffer_cap, cond.dim)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 29])
    metrics = DaggerMetrics()
    t0 = time.perf_counter()
    T = max(1, cfg.steps_per_round // cfg.n_envs)
    for rnd in range(cfg.rounds):
        beta = cfg.beta(rnd)
        obs_l, cond_l, act_l = [], [], []
        ended, terminated_count = 0, 0
        for _ in range(T):
            envs.refresh_latents()
            obs = envs.obs()
            frames, prev = envs.sim.frames.copy(), envs.sim.prev_action.copy()
            labels = teacher_actions(teachers, [envs.groups[r] for r in envs.rec], frames, prev, envs.ref(1))
            if rnd == 0:
                student.obs_norm.update(obs)
            acts = student.act(obs, envs.z)
            if beta > 0:
                use_teacher = rng.random(envs.n) < beta
                acts = np.where(use_teacher[:, None], labels, acts)
            obs_l.append(obs.astype(np.float32))
            cond_l.append(envs.z.astype(np.float32))
            act_l.append(labels.astype(np.float32))
            term, trunc = envs.step(acts)
            done = term | trunc
            if probe is not None:
                probe(frames, prev, labels, acts, done)
            ended += int(done.sum())
            terminated_count += int(term.sum())
            for i in np.flatnonzero(done):
                envs.reset_env(i)
        buf.add(np.concatenate(obs_l), np.concatenate(cond_l), np.concatenate(act_l))
        if rnd == 0:
            student.act_mean.copy_(torch.as_tensor(buf.act.mean(0), dtype=torch.float64))
            student.act_std.copy_(torch.as_tensor(np.maximum(buf.act.std(0), 1e-2), dtype=torch.float64))
        loss = _fit(student, opt, buf, cfg, rng)
        metrics.loss.append(loss)
        metrics.termination_rate.append(terminated_count / ended if ended else float("nan"))
        metrics.buffer_size.append(len(buf))
        if log is not None:
            log({"round": rnd, "loss": loss, "termination_rate": metrics.termination_rate[-1], "buffer": len(buf)})
    metrics.wall_time = time.perf_counter() - t0
    student.eval()
    return student, metrics


def _fit(student: StudentPolicy, opt, buf: _Buffer, cfg: DaggerConfig, rng) -> float:
    student.train()
    obs = torch.as_tensor(buf.obs)
    cond = torch.as_tensor(buf.cond)
    act = torch.as_tensor(buf.act)
    last = 0.0
    for _ in range(cfg.epochs_per_round):
        perm = torch.as_tensor(rng.permutation(len(buf)))
        total, count = 0.0, 0
        for s in range(0, len(buf), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            loss = huber(student(obs[idx], cond[idx]), act[idx], cfg.huber_delta)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        last = total / count
    student.eval()
    return last


def smoothed_monotone(values: Sequence[float], window: int = 5, tol: float = 0.0) -> bool:
    """True when the trailing moving average never increases by more than ``tol`` (relative)."""
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return bool(np.all(np.diff(v) <= tol * np.abs(v[:-1])))
    ma = np.convolve(v, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(ma) <= tol * np.abs(ma[:-1])))


@dataclass
class StudentEval:
    termination_rate: float
    mean_pos_err: float
    episodes: int


def evaluate_student(
    student: StudentPolicy,
    cond: Conditioning,
    dataset,
    records: Optional[Sequence[int]] = None,
    seed: int = 0,
    domain_randomization: bool = False,
) -> StudentEval:
    """Closed loop from each record's first frame, conditioned on the prior mean."""
    records = list(range(len(dataset.records))) if records is None else list(records)
    envs = StudentEnvs(dataset, cond, len(records), seed, False, domain_randomization, 10**6, records, "sequential")
    alive = np.ones(envs.n, bool)
    term_any = np.zeros(envs.n, bool)
    err_sum = np.zeros(envs.n)
    while alive.any():
        envs.refresh_latents()
        acts = student.act(envs.obs(), envs.z)
        ref = envs.ref(1)
        term, trunc = envs.step(acts)
        err_sum += alive * np.linalg.norm(ref[:, :3] - envs.sim.position, axis=1)
        term_any |= alive & term
        alive &= ~(term | trunc)
        # finished environments are parked at their last reference frame
        envs.k = np.minimum(envs.k, envs.limit)
    steps = np.maximum(envs.steps, 1)
    return StudentEval(float(term_any.mean()), float(np.mean(err_sum / steps)), envs.n)


# ---------------------------------------------------------------------------
# persistence


def save_student(path, student: StudentPolicy, meta: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    torch.save(student.state_dict(), buf)
    header = {
        "cond_dim": student.cond_dim,
        "cond_kind": student.cond_kind,
        "arch": student.arch,
        "source_checksum": student.source_checksum,
        **(meta or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), state=np.frombuffer(buf.getvalue(), dtype=np.uint8))


def load_student(path, expect: Optional[dict] = None) -> tuple[StudentPolicy, dict]:
    """Load a student; ``expect`` maps header keys (e.g. checksums) to required values."""
    with np.load(Path(path), allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        state = torch.load(io.BytesIO(z["state"].tobytes()), weights_only=True)
    for k, v in (expect or {}).items():
        if h.get(k) != v:
            raise IncompatibilityError(f"student file {path} has {k}={h.get(k)!r}, expected {v!r}")
    s = StudentPolicy(h["cond_dim"], h["cond_kind"], **h["arch"])
    s.load_state_dict(state)
    s.source_checksum = h.get("source_checksum", "")
    s.eval()
    return s, h
