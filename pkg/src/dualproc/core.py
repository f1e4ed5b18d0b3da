"""Kinematic state representation, rotation math and trajectory transforms.

Conventions
-----------
* Euler angles are stored as ``(yaw, roll, pitch)`` and composed intrinsically
  yaw -> pitch -> roll, i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* A 6D rotation is the first two columns of ``R`` laid out column-major:
  ``r[0:3] = R[:, 0]``, ``r[3:6] = R[:, 1]``.
* Quaternions are ``(w, x, y, z)``.
* Root linear/angular velocities are world-frame; body points are root-frame.

Trajectory file layout (``.npz``): ``header`` holds a JSON string with keys
``dt``, ``category``, ``id``, ``mirror_table_version``, ``fields``; ``frames``
is an ``(N, 72)`` float64 array whose columns follow ``FRAME_FIELDS``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dualproc import body
from dualproc.errors import DegenerateRotationError, InvalidArgumentError, OutOfRangeError

DEFAULT_DT = 0.02
DEFAULT_STRIDE = 5
STATE_DIM = 2 + 3 * body.N_JOINTS
DELTA_FRAME_DIM = 3 + 6 + 3 * body.N_JOINTS

FRAME_FIELDS = (
    ("position", 3),
    ("euler", 3),
    ("body_pos", 36),
    ("joint_q", 12),
    ("joint_qd", 12),
    ("root_lin_vel", 3),
    ("root_ang_vel", 3),
)
FRAME_DIM = sum(n for _, n in FRAME_FIELDS)


# ---------------------------------------------------------------------------
# rotations


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def _check_finite(*xs) -> None:
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("non-finite input")


def rot_z(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, o], -1), np.stack([s, c, o], -1), np.stack([o, o, i], -1)], -2)


def rot_y(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, o, s], -1), np.stack([o, i, o], -1), np.stack([-s, o, c], -1)], -2)


def rot_x(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    o, i = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([i, o, o], -1), np.stack([o, c, -s], -1), np.stack([o, s, c], -1)], -2)


def matrix_from_euler(yaw, roll, pitch) -> np.ndarray:
    """Closed-form ``Rz(yaw) Ry(pitch) Rx(roll)``; broadcasts over leading dims."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rows = [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
    rows = [np.broadcast_arrays(*r) for r in rows]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def euler_from_matrix(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`matrix_from_euler`; returns ``(..., 3)`` as (yaw, roll, pitch)."""
    R = np.asarray(R, dtype=float)
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    pitch = np.arctan2(-R[..., 2, 0], np.hypot(R[..., 2, 1], R[..., 2, 2]))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return np.stack([yaw, roll, pitch], -1)


def rot6d_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rot6d_from_euler(yaw, roll, pitch) -> np.ndarray:
    """6D encoding of the Euler rotation. Raises on non-finite input."""
    _check_finite(yaw, roll, pitch)
    return rot6d_from_matrix(matrix_from_euler(yaw, roll, pitch))


def matrix_from_rot6d(r: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Recover a rotation matrix from a 6D vector by Gram-Schmidt.

    Both embedded columns are normalized, so any positive rescaling of either
    column gives the same matrix.
    """
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 6:
        raise InvalidArgumentError(f"expected trailing dim 6, got {r.shape}")
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise DegenerateRotationError("zero first column")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateRotationError("second column zero or parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def quat_from_euler(yaw, roll, pitch) -> np.ndarray:
    cy, sy = np.cos(0.5 * np.asarray(yaw)), np.sin(0.5 * np.asarray(yaw))
    cp, sp = np.cos(0.5 * np.asarray(pitch)), np.sin(0.5 * np.asarray(pitch))
    cr, sr = np.cos(0.5 * np.asarray(roll)), np.sin(0.5 * np.asarray(roll))
    w = cy * cp * cr + sy * sp * sr
    x = cy * cp * sr - sy * sp * cr
    y = cy * sp * cr + sy * cp * sr
    z = sy * cp * cr - cy * sp * sr
    return np.stack(np.broadcast_arrays(w, x, y, z), -1)


def quat_geodesic_error(q_a: np.ndarray, q_b: np.ndarray, check: bool = True):
    """Geodesic angle in [0, pi] between two unit quaternions (sign-invariant)."""
    q_a = np.asarray(q_a, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    if check:
        for q in (q_a, q_b):
            if not np.all(np.abs(np.linalg.norm(q, axis=-1) - 1.0) <= 1e-6):
                raise InvalidArgumentError("quaternion is not unit-norm")
    # relative rotation conj(a) * b, computed without normalizing to keep precision
    aw, ax, ay, az = np.moveaxis(q_a, -1, 0)
    bw, bx, by, bz = np.moveaxis(q_b, -1, 0)
    w = aw * bw + ax * bx + ay * by + az * bz
    x = aw * bx - ax * bw - ay * bz + az * by
    y = aw * by + ax * bz - ay * bw - az * bx
    z = aw * bz - ax * by + ay * bx - az * bw
    v = np.sqrt(x * x + y * y + z * z)
    return 2.0 * np.arctan2(v, np.abs(w))


def gravity_in_body(yaw, roll, pitch) -> np.ndarray:
    """World gravity direction (0, 0, -1) expressed in the body frame."""
    R = matrix_from_euler(yaw, roll, pitch)
    return -R[..., 2, :]


# ---------------------------------------------------------------------------
# state types


@dataclass(frozen=True)
class RootPose:
    position: np.ndarray
    yaw: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0

    @property
    def euler(self) -> np.ndarray:
        return np.array([self.yaw, self.roll, self.pitch])

    @property
    def rot6d(self) -> np.ndarray:
        return rot6d_from_euler(self.yaw, self.roll, self.pitch)

    @property
    def matrix(self) -> np.ndarray:
        return matrix_from_euler(self.yaw, self.roll, self.pitch)


@dataclass(frozen=True)
class RobotState:
    root: RootPose
    body_pos: np.ndarray
    joint_q: np.ndarray
    joint_qd: np.ndarray = field(default_factory=lambda: np.zeros(body.N_JOINTS))
    root_lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_joints(
        cls,
        joint_q,
        xy=(0.0, 0.0),
        yaw: float = 0.0,
        joint_qd=None,
        lin_vel_xy=(0.0, 0.0),
        yaw_rate: float = 0.0,
    ) -> "RobotState":
        """Build a state consistent with the toy kinematic and posture maps."""
        q = np.asarray(joint_q, dtype=float)
        qd = np.zeros(body.N_JOINTS) if joint_qd is None else np.asarray(joint_qd, dtype=float)
        z, roll, pitch = body.root_posture(q)
        zd, rolld, pitchd = body.root_posture_rates(qd)
        return cls(
            root=RootPose(np.array([xy[0], xy[1], float(z)]), float(yaw), float(roll), float(pitch)),
            body_pos=body.body_positions(q),
            joint_q=q,
            joint_qd=qd,
            root_lin_vel=np.array([lin_vel_xy[0], lin_vel_xy[1], float(zd)]),
            root_ang_vel=np.array([float(rolld), float(pitchd), float(yaw_rate)]),
        )

    @classmethod
    def standing(cls, xy=(0.0, 0.0), yaw: float = 0.0) -> "RobotState":
        return cls.from_joints(np.zeros(body.N_JOINTS), xy=xy, yaw=yaw)

    @classmethod
    def zero(cls) -> "RobotState":
        return cls(RootPose(np.zeros(3)), np.zeros((12, 3)), np.zeros(12))

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [
                self.root.position,
                self.root.euler,
                np.ravel(self.body_pos),
                self.joint_q,
                self.joint_qd,
                self.root_lin_vel,
                self.root_ang_vel,
            ]
        ).astype(float)

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "RobotState":
        parts = _split_frame(np.asarray(v, dtype=float))
        yaw, roll, pitch = parts["euler"]
        return cls(
            RootPose(parts["position"].copy(), float(yaw), float(roll), float(pitch)),
            parts["body_pos"].reshape(12, 3).copy(),
            parts["joint_q"].copy(),
            parts["joint_qd"].copy(),
            parts["root_lin_vel"].copy(),
            parts["root_ang_vel"].copy(),
        )


def _split_frame(v: np.ndarray) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for name, n in FRAME_FIELDS:
        out[name] = v[..., i : i + n]
        i += n
    return out


def state_vector(s: RobotState) -> np.ndarray:
    """(pitch, roll, body_pos row-major), dimension 38."""
    return np.concatenate([[s.root.pitch, s.root.roll], np.ravel(s.body_pos)])


# ---------------------------------------------------------------------------
# trajectories


class KinematicTrajectory:
    """Fixed-rate sequence of robot states stored as stacked arrays."""

    def __init__(self, frames: np.ndarray, dt: float = DEFAULT_DT, category: str = "", id: str = ""):
        frames = np.asarray(frames, dtype=float)
        if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
            raise InvalidArgumentError(f"frames must be (N, {FRAME_DIM}), got {frames.shape}")
        if frames.shape[0] < 2:
            raise InvalidArgumentError("a trajectory needs at least 2 frames")
        if not dt > 0:
            raise InvalidArgumentError("dt must be positive")
        self.data = frames
        self.data.flags.writeable = False
        self.dt = float(dt)
        self.category = category
        self.id = id

    @classmethod
    def from_states(cls, states: Iterable[RobotState], dt: float = DEFAULT_DT, category: str = "", id: str = ""):
        return cls(np.stack([s.to_flat() for s in states]), dt, category, id)

    def __len__(self) -> int:
        return self.data.shape[0]

    def _field(self, name: str) -> np.ndarray:
        return _split_frame(self.data)[name]

    @property
    def position(self) -> np.ndarray:
        return self._field("position")

    @property
    def euler(self) -> np.ndarray:
        return self._field("euler")

    @property
    def yaw(self) -> np.ndarray:
        return self.data[:, 3]

    @property
    def body_pos(self) -> np.ndarray:
        return self._field("body_pos").reshape(-1, 12, 3)

    @property
    def joint_q(self) -> np.ndarray:
        return self._field("joint_q")

    @property
    def joint_qd(self) -> np.ndarray:
        return self._field("joint_qd")

    @property
    def root_lin_vel(self) -> np.ndarray:
        return self._field("root_lin_vel")

    @property
    def root_ang_vel(self) -> np.ndarray:
        return self._field("root_ang_vel")

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def frame(self, i: int) -> RobotState:
        if not -len(self) <= i < len(self):
            raise OutOfRangeError(f"frame {i} outside trajectory of length {len(self)}")
        return RobotState.from_flat(self.data[i])

    @property
    def frames(self) -> list[RobotState]:
        return [self.frame(i) for i in range(len(self))]

    def with_data(self, frames: np.ndarray, **kw) -> "KinematicTrajectory":
        args = dict(dt=self.dt, category=self.category, id=self.id)
        args.update(kw)
        return KinematicTrajectory(frames, **args)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, KinematicTrajectory)
            and self.dt == other.dt
            and self.category == other.category
            and self.data.shape == other.data.shape
            and bool(np.all(self.data == other.data))
        )


def save_trajectory(path, traj: KinematicTrajectory) -> None:
    header = {
        "dt": traj.dt,
        "category": traj.category,
        "id": traj.id,
        "mirror_table_version": body.MIRROR_TABLE_VERSION,
        "fields": [list(f) for f in FRAME_FIELDS],
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), frames=traj.data)


def load_trajectory(path) -> KinematicTrajectory:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        frames = z["frames"]
    if header.get("mirror_table_version") != body.MIRROR_TABLE_VERSION:
        raise InvalidArgumentError("trajectory written with a different mirror table")
    return KinematicTrajectory(frames, header["dt"], header["category"], header["id"])


# ---------------------------------------------------------------------------
# delta futures


@dataclass(frozen=True)
class DeltaFuture:
    """Changes from an anchor frame to M future frames.

    Root deltas live in the anchor's heading frame (rotated by -yaw); the
    rotation delta is a plain difference of 6D vectors.
    """

    root_dpos: np.ndarray  # (M, 3)
    root_drot: np.ndarray  # (M, 6)
    body_dpos: np.ndarray  # (M, 12, 3)

    @property
    def M(self) -> int:
        return self.root_dpos.shape[0]

    def flatten(self) -> np.ndarray:
        M = self.M
        return np.concatenate(
            [self.root_dpos, self.root_drot, self.body_dpos.reshape(M, -1)], axis=1
        ).ravel()

    @classmethod
    def from_flat(cls, v: np.ndarray, M: int) -> "DeltaFuture":
        v = np.asarray(v, dtype=float)
        if v.size != M * DELTA_FRAME_DIM:
            raise InvalidArgumentError(f"expected {M * DELTA_FRAME_DIM} values, got {v.size}")
        v = v.reshape(M, DELTA_FRAME_DIM)
        return cls(v[:, :3].copy(), v[:, 3:9].copy(), v[:, 9:].reshape(M, 12, 3).copy())


def _relative_rot6d(yaw_anchor, euler) -> np.ndarray:
    R = matrix_from_euler(euler[..., 0], euler[..., 1], euler[..., 2])
    return rot6d_from_matrix(rot_z(-np.asarray(yaw_anchor)) @ R)


def delta_future(traj: KinematicTrajectory, t: int, M: int, stride: int = DEFAULT_STRIDE) -> DeltaFuture:
    if M < 1 or stride < 1:
        raise InvalidArgumentError("M and stride must be >= 1")
    if t < 0 or t + M * stride >= len(traj):
        raise OutOfRangeError(f"t={t}, M={M}, stride={stride} overruns {len(traj)} frames")
    idx = t + stride * np.arange(1, M + 1)
    yaw_t = traj.yaw[t]
    Rh = rot_z(-yaw_t)
    dpos = (traj.position[idx] - traj.position[t]) @ Rh.T
    drot = _relative_rot6d(yaw_t, traj.euler[idx]) - _relative_rot6d(yaw_t, traj.euler[t])
    dbody = traj.body_pos[idx] - traj.body_pos[t]
    return DeltaFuture(dpos, drot, dbody)


def apply_delta(anchor: RobotState, d: DeltaFuture) -> list[RobotState]:
    """Decode a DeltaFuture back into M poses (velocities are left at zero).

    Yaw is unwrapped to the branch closest to the anchor so round trips are
    exact for sub-half-turn deltas.
    """
    yaw_t = anchor.root.yaw
    base6d = _relative_rot6d(yaw_t, anchor.root.euler)
    R_rel = matrix_from_rot6d(base6d + d.root_drot)
    eul = euler_from_matrix(rot_z(yaw_t) @ R_rel)
    out = []
    for k in range(d.M):
        pos = anchor.root.position + rot_z(yaw_t) @ d.root_dpos[k]
        yaw = yaw_t + float(wrap_angle(eul[k, 0] - yaw_t))
        bp = anchor.body_pos + d.body_dpos[k]
        out.append(
            RobotState(
                RootPose(pos, yaw, float(eul[k, 1]), float(eul[k, 2])),
                bp,
                body.joints_from_body(bp),
            )
        )
    return out


def anchor_ticks(n_frames: int, M: int, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    """Frame indices on the slow clock that admit a full M-step future."""
    return np.arange(0, n_frames - M * stride, stride)


# ---------------------------------------------------------------------------
# mirroring

_MIRROR_Y = np.array([1.0, -1.0, 1.0])
_MIRROR_ANG = np.array([-1.0, 1.0, -1.0])


def mirror_frames(frames: np.ndarray) -> np.ndarray:
    """Reflect stacked flat frames across the world x-z plane."""
    f = np.array(frames, dtype=float, copy=True)
    p = _split_frame(f)
    p["position"][...] *= _MIRROR_Y
    p["euler"][..., 0] *= -1.0  # yaw
    p["euler"][..., 1] *= -1.0  # roll
    bp = p["body_pos"].reshape(*f.shape[:-1], 12, 3)
    p["body_pos"][...] = (bp[..., body.MIRROR_PERM, :] * _MIRROR_Y).reshape(*f.shape[:-1], 36)
    p["joint_q"][...] = body.mirror_joints(p["joint_q"])
    p["joint_qd"][...] = body.mirror_joints(p["joint_qd"])
    p["root_lin_vel"][...] *= _MIRROR_Y
    p["root_ang_vel"][...] *= _MIRROR_ANG
    return f


def mirror_trajectory(traj: KinematicTrajectory) -> KinematicTrajectory:
    return traj.with_data(mirror_frames(traj.data))


def mirror_state(s: RobotState) -> RobotState:
    return RobotState.from_flat(mirror_frames(s.to_flat()))


def path_length(traj: KinematicTrajectory) -> float:
    return float(np.sum(np.linalg.norm(np.diff(traj.position[:, :2], axis=0), axis=1)))


def pairwise_point_distances(traj: KinematicTrajectory) -> np.ndarray:
    pts = traj.body_pos
    return np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)


def rotation_from_state(s: RobotState) -> np.ndarray:
    return s.root.matrix


def heading_frame_vector(yaw: float, v: Sequence[float]) -> np.ndarray:
    """Rotate a world vector into the yaw-only heading frame."""
    return rot_z(-yaw) @ np.asarray(v, dtype=float)


def angle_between(a: float, b: float) -> float:
    return float(abs(wrap_angle(a - b)))


__all__ = [
    "DeltaFuture",
    "KinematicTrajectory",
    "RobotState",
    "RootPose",
    "apply_delta",
    "delta_future",
    "matrix_from_euler",
    "matrix_from_rot6d",
    "mirror_trajectory",
    "quat_geodesic_error",
    "rot6d_from_euler",
    "state_vector",
]
