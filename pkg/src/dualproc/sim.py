"""Toy humanoid dynamics: virtual locomotion actuator plus 12 servo joints.

The root tracks a commanded body-frame ``(vx, vy, yaw_rate)`` through a
first-order lag whose time constant is ``TAU0 / friction``; each joint is a
critically damped servo with natural frequency ``OMEGA0 / sqrt(armature)``
integrated in closed form, so equilibria are exact. Pushes add an x-y
velocity kick on a randomized schedule.

Two APIs share the same integrator: :func:`reset`/:func:`step` operate on
immutable :class:`SimState` values, and :class:`BatchSim` steps many
environments in place for training and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from dualproc import body
from dualproc.core import (
    DEFAULT_DT,
    FRAME_DIM,
    RobotState,
    RootPose,
    _split_frame,
    gravity_in_body,
    matrix_from_euler,
    rot_z,
)
from dualproc.errors import IllegalStateError, InvalidArgumentError

TAU0 = 0.3
OMEGA0 = 10.0
N_PUSHES = 16
ACTION_DIM = 15
ROOT_CMD_LIMIT = np.array([4.0, 4.0, 6.0])
POS_TERMINATION = 0.5
ORI_TERMINATION = 0.8

FRICTION_RANGE = (0.3, 0.8)
RESTITUTION_RANGE = (0.0, 0.5)
OFFSET_RANGE = (-0.05, 0.05)
ARMATURE_RANGE = (0.2, 2.0)
PUSH_INTERVAL_RANGE = (10.0, 15.0)
PUSH_VEL_RANGE = (-0.5, 0.5)


@dataclass(frozen=True)
class DRParams:
    friction: float
    restitution: float
    joint_default_offset: np.ndarray
    armature_scale: np.ndarray
    push_interval: np.ndarray  # (N_PUSHES,) seconds before each successive push
    push_vel: np.ndarray  # (N_PUSHES, 2)

    @classmethod
    def nominal(cls, friction: float = 0.8, pushes: bool = False) -> "DRParams":
        """Fixed parameters for tests and demos; pushes disabled unless asked."""
        interval = np.full(N_PUSHES, 12.5 if pushes else np.inf)
        return cls(friction, 0.0, np.zeros(12), np.ones(12), interval, np.zeros((N_PUSHES, 2)))


def sample_dr(seed) -> DRParams:
    """Uniform draws over the domain-randomization table; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return DRParams(
        friction=float(rng.uniform(*FRICTION_RANGE)),
        restitution=float(rng.uniform(*RESTITUTION_RANGE)),
        joint_default_offset=rng.uniform(*OFFSET_RANGE, size=12),
        armature_scale=rng.uniform(*ARMATURE_RANGE, size=12),
        push_interval=rng.uniform(*PUSH_INTERVAL_RANGE, size=N_PUSHES),
        push_vel=rng.uniform(*PUSH_VEL_RANGE, size=(N_PUSHES, 2)),
    )


@dataclass(frozen=True)
class Action:
    joint_targets: np.ndarray
    root_cmd: np.ndarray  # body-frame (vx, vy, yaw_rate)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.joint_targets, self.root_cmd]).astype(float)

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = np.asarray(v, dtype=float)
        if v.shape != (ACTION_DIM,):
            raise InvalidArgumentError(f"action must have {ACTION_DIM} entries")
        return cls(v[:12].copy(), v[12:].copy())

    @classmethod
    def hold(cls, s: RobotState) -> "Action":
        return cls(s.joint_q.copy(), np.zeros(3))


@dataclass(frozen=True)
class SimState:
    robot: RobotState
    time: float
    prev_action: np.ndarray
    dr: DRParams
    next_push_time: float
    push_index: int = 0
    terminated: bool = False
    termination_reason: Optional[str] = None
    steps: int = 0


# ---------------------------------------------------------------------------
# integrator on stacked arrays


def joint_omega(armature_scale) -> np.ndarray:
    return OMEGA0 / np.sqrt(np.asarray(armature_scale, dtype=float))


def joint_velocity_bound(armature_scale) -> np.ndarray:
    """Upper bound on |qd| from rest under any clamped target sequence.

    The servo's step-response derivative ``w^2 s exp(-w s)`` has L1 norm
    ``2w/e``; centring the target range gives ``w * (hi - lo) / e``.
    """
    return joint_omega(armature_scale) * (body.JOINT_UPPER - body.JOINT_LOWER) / np.e


def _servo(q, qd, target, omega, dt):
    e0 = q - target
    b = qd + omega * e0
    decay = np.exp(-omega * dt)
    q_new = target + (e0 + b * dt) * decay
    qd_new = (qd - omega * b * dt) * decay
    return q_new, qd_new


def advance(frames: np.ndarray, action: np.ndarray, friction, armature, offset, dt: float) -> np.ndarray:
    """One integration step on flat frames (..., 72) with actions (..., 15)."""
    f = _split_frame(frames)
    action = np.asarray(action, dtype=float)
    friction = np.asarray(friction, dtype=float)
    target = body.clamp_to_limits(action[..., :12] + offset)
    omega = joint_omega(armature)
    q, qd = _servo(f["joint_q"], f["joint_qd"], target, omega, dt)
    clipped = body.clamp_to_limits(q)
    qd = np.where(clipped != q, 0.0, qd)
    q = clipped

    yaw = f["euler"][..., 0]
    cmd = np.clip(action[..., 12:15], -ROOT_CMD_LIMIT, ROOT_CMD_LIMIT)
    c, s = np.cos(yaw), np.sin(yaw)
    target_v = np.stack([c * cmd[..., 0] - s * cmd[..., 1], s * cmd[..., 0] + c * cmd[..., 1]], -1)
    alpha = 1.0 - np.exp(-dt * friction / TAU0)
    v_xy = f["root_lin_vel"][..., :2]
    v_xy = v_xy + alpha[..., None] * (target_v - v_xy)
    yaw_rate = f["root_ang_vel"][..., 2]
    yaw_rate = yaw_rate + alpha * (cmd[..., 2] - yaw_rate)

    z, roll, pitch = body.root_posture(q)
    zd, rolld, pitchd = body.root_posture_rates(qd)
    out = np.empty_like(frames)
    o = _split_frame(out)
    o["position"][..., :2] = f["position"][..., :2] + v_xy * dt
    o["position"][..., 2] = z
    o["euler"][..., 0] = yaw + yaw_rate * dt
    o["euler"][..., 1] = roll
    o["euler"][..., 2] = pitch
    o["body_pos"][...] = body.body_positions(q).reshape(*q.shape[:-1], 36)
    o["joint_q"][...] = q
    o["joint_qd"][...] = qd
    o["root_lin_vel"][..., :2] = v_xy
    o["root_lin_vel"][..., 2] = zd
    o["root_ang_vel"][..., 0] = rolld
    o["root_ang_vel"][..., 1] = pitchd
    o["root_ang_vel"][..., 2] = yaw_rate
    return out


def consistent_frames(frames: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Overwrite the joint-slaved fields of flat frames so they match ``q``."""
    out = np.array(frames, dtype=float, copy=True)
    o = _split_frame(out)
    z, roll, pitch = body.root_posture(q)
    o["joint_q"][...] = q
    o["body_pos"][...] = body.body_positions(q).reshape(*np.shape(q)[:-1], 36)
    o["position"][..., 2] = z
    o["euler"][..., 1] = roll
    o["euler"][..., 2] = pitch
    return out


def check_consistent(s: RobotState, tol: float = 1e-6) -> bool:
    return bool(
        np.all(np.isfinite(s.to_flat()))
        and np.max(np.abs(s.body_pos - body.body_positions(s.joint_q))) <= tol
    )


# ---------------------------------------------------------------------------
# single-environment API


def reset(scene, start: RobotState, dr: DRParams) -> SimState:
    """Start an episode at ``start`` with calibration offsets applied."""
    if not check_consistent(start):
        raise InvalidArgumentError("start state is inconsistent with the kinematic map")
    q = start.joint_q + dr.joint_default_offset
    frames = consistent_frames(start.to_flat(), q)
    robot = RobotState.from_flat(frames)
    heading_v = rot_z(-start.root.yaw) @ start.root_lin_vel
    prev = np.concatenate([start.joint_q, [heading_v[0], heading_v[1], start.root_ang_vel[2]]])
    return SimState(robot, 0.0, prev, dr, float(dr.push_interval[0]))


def step(sim: SimState, a, dt: float = DEFAULT_DT) -> SimState:
    if sim.terminated:
        raise IllegalStateError("cannot step a terminated simulation; reset first")
    av = a.to_vector() if isinstance(a, Action) else np.asarray(a, dtype=float)
    if av.shape != (ACTION_DIM,) or not np.all(np.isfinite(av)):
        raise InvalidArgumentError("action must be 15 finite values")
    dr = sim.dr
    frames = advance(sim.robot.to_flat(), av, dr.friction, dr.armature_scale, dr.joint_default_offset, dt)
    t = sim.time + dt
    next_push, k = sim.next_push_time, sim.push_index
    if t >= next_push and k < N_PUSHES:
        o = _split_frame(frames)
        o["root_lin_vel"][:2] += dr.push_vel[k]
        k += 1
        next_push = next_push + (float(dr.push_interval[k]) if k < N_PUSHES else np.inf)
    return replace(
        sim,
        robot=RobotState.from_flat(frames),
        time=t,
        prev_action=av,
        next_push_time=next_push,
        push_index=k,
        steps=sim.steps + 1,
    )


def terminate(sim: SimState, reason: str) -> SimState:
    return replace(sim, terminated=True, termination_reason=reason)


def orientation_gap(robot_euler, ref_euler):
    """|z-component of (g_ref^B - g_robot^B)|, gravity expressed in each body frame."""
    g_r = gravity_in_body(robot_euler[..., 0], robot_euler[..., 1], robot_euler[..., 2])
    g_m = gravity_in_body(ref_euler[..., 0], ref_euler[..., 1], ref_euler[..., 2])
    return np.abs(g_m[..., 2] - g_r[..., 2])


def check_early_termination(sim: SimState, ref: RobotState) -> tuple[bool, Optional[str]]:
    robot = sim.robot
    if np.linalg.norm(ref.root.position - robot.root.position) > POS_TERMINATION:
        return True, "position"
    if orientation_gap(robot.root.euler, ref.root.euler) > ORI_TERMINATION:
        return True, "orientation"
    return False, None


# ---------------------------------------------------------------------------
# batched engine


@dataclass
class BatchSim:
    """In-place vectorized simulator over ``n`` independent environments."""

    n: int
    dt: float = DEFAULT_DT
    frames: np.ndarray = field(init=False)
    prev_action: np.ndarray = field(init=False)
    time: np.ndarray = field(init=False)
    friction: np.ndarray = field(init=False)
    armature: np.ndarray = field(init=False)
    offset: np.ndarray = field(init=False)
    push_interval: np.ndarray = field(init=False)
    push_vel: np.ndarray = field(init=False)
    next_push: np.ndarray = field(init=False)
    push_index: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.n
        self.frames = np.zeros((n, FRAME_DIM))
        self.prev_action = np.zeros((n, ACTION_DIM))
        self.time = np.zeros(n)
        self.friction = np.full(n, 0.8)
        self.armature = np.ones((n, 12))
        self.offset = np.zeros((n, 12))
        self.push_interval = np.full((n, N_PUSHES), np.inf)
        self.push_vel = np.zeros((n, N_PUSHES, 2))
        self.next_push = np.full(n, np.inf)
        self.push_index = np.zeros(n, dtype=int)

    def reset(self, i: int, start: RobotState, dr: DRParams) -> None:
        s = reset(None, start, dr)
        self.frames[i] = s.robot.to_flat()
        self.prev_action[i] = s.prev_action
        self.time[i] = 0.0
        self.friction[i] = dr.friction
        self.armature[i] = dr.armature_scale
        self.offset[i] = dr.joint_default_offset
        self.push_interval[i] = dr.push_interval
        self.push_vel[i] = dr.push_vel
        self.next_push[i] = s.next_push_time
        self.push_index[i] = 0

    def state(self, i: int) -> SimState:
        dr = DRParams(
            float(self.friction[i]),
            0.0,
            self.offset[i].copy(),
            self.armature[i].copy(),
            self.push_interval[i].copy(),
            self.push_vel[i].copy(),
        )
        return SimState(
            RobotState.from_flat(self.frames[i]),
            float(self.time[i]),
            self.prev_action[i].copy(),
            dr,
            float(self.next_push[i]),
            int(self.push_index[i]),
        )

    def step(self, actions: np.ndarray) -> None:
        actions = np.asarray(actions, dtype=float)
        self.frames = advance(self.frames, actions, self.friction, self.armature, self.offset, self.dt)
        self.prev_action = actions.copy()
        self.time = self.time + self.dt
        due = (self.time >= self.next_push) & (self.push_index < N_PUSHES)
        for i in np.flatnonzero(due):
            k = self.push_index[i]
            _split_frame(self.frames[i])["root_lin_vel"][:2] += self.push_vel[i, k]
            k += 1
            self.push_index[i] = k
            self.next_push[i] += self.push_interval[i, k] if k < N_PUSHES else np.inf

    # convenience views
    @property
    def position(self) -> np.ndarray:
        return self.frames[:, 0:3]

    @property
    def euler(self) -> np.ndarray:
        return self.frames[:, 3:6]

    @property
    def joint_q(self) -> np.ndarray:
        return self.frames[:, 42:54]

    @property
    def joint_qd(self) -> np.ndarray:
        return self.frames[:, 54:66]

    @property
    def lin_vel(self) -> np.ndarray:
        return self.frames[:, 66:69]

    @property
    def ang_vel(self) -> np.ndarray:
        return self.frames[:, 69:72]

    @property
    def body_pos(self) -> np.ndarray:
        return self.frames[:, 6:42].reshape(-1, 12, 3)


def world_body_points(frames: np.ndarray) -> np.ndarray:
    """Global positions of the 12 body points for flat frames (..., 72)."""
    f = _split_frame(frames)
    e = f["euler"]
    R = matrix_from_euler(e[..., 0], e[..., 1], e[..., 2])
    bp = f["body_pos"].reshape(*frames.shape[:-1], 12, 3)
    return f["position"][..., None, :] + np.einsum("...ij,...kj->...ki", R, bp)


def robot_pose(frames: np.ndarray) -> RootPose:
    f = _split_frame(frames)
    y, r, p = f["euler"]
    return RootPose(f["position"].copy(), float(y), float(r), float(p))
