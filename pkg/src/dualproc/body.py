"""Toy 13-joint humanoid: one root plus 12 scalar body joints.

Each body joint drives exactly one body point along a fixed axis, so the
kinematic map is linear::

    body_pos[i] = REST_OFFSET[i] + AXIS[i] * joint_q[i]

Body points are expressed in the root frame. Root height, roll and pitch are
slaved to the joints through the posture map (knees lower the pelvis, the
torso joints tilt the root), which is what lets a sitting motion exist
without contact dynamics.

Mirror table (version ``MIRROR_TABLE_VERSION``): mirroring across the x-z
plane maps joint ``i`` to ``MIRROR_SIGN[i] * joint_q[MIRROR_PERM[i]]``.
"""

from __future__ import annotations

import numpy as np

N_JOINTS = 12
MIRROR_TABLE_VERSION = 1

BODY_NAMES = (
    "torso",
    "head",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_foot",
    "r_foot",
    "l_elbow",
    "r_elbow",
    "l_hand",
    "r_hand",
)

REST_OFFSET = np.array(
    [
        [0.00, 0.00, 0.25],
        [0.00, 0.00, 0.50],
        [0.00, 0.10, -0.05],
        [0.00, -0.10, -0.05],
        [0.00, 0.10, -0.36],
        [0.00, -0.10, -0.36],
        [0.00, 0.10, -0.70],
        [0.00, -0.10, -0.70],
        [0.00, 0.22, 0.10],
        [0.00, -0.22, 0.10],
        [0.00, 0.22, -0.12],
        [0.00, -0.22, -0.12],
    ]
)

AXIS = np.array(
    [
        [0.25, 0.00, 0.00],  # torso lean
        [0.00, 0.30, 0.00],  # head sway, drives root roll
        [0.30, 0.00, 0.00],
        [0.30, 0.00, 0.00],
        [0.25, 0.00, 0.06],
        [0.25, 0.00, 0.06],
        [0.30, 0.00, 0.12],
        [0.30, 0.00, 0.12],
        [0.18, 0.00, 0.10],
        [0.18, 0.00, 0.10],
        [0.30, 0.00, 0.28],
        [0.30, 0.00, 0.28],
    ]
)

MIRROR_PERM = np.array([0, 1, 3, 2, 5, 4, 7, 6, 9, 8, 11, 10])
MIRROR_SIGN = np.array([1.0, -1.0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1])

JOINT_LOWER = np.array([-0.5, -0.4, -1.2, -1.2, -0.5, -0.5, -1.0, -1.0, -0.5, -0.5, -0.5, -0.5])
JOINT_UPPER = np.array([0.5, 0.4, 1.2, 1.2, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.2, 2.2])
_MID = 0.5 * (JOINT_LOWER + JOINT_UPPER)
_HALF = 0.5 * (JOINT_UPPER - JOINT_LOWER)
SOFT_LOWER = _MID - 0.9 * _HALF
SOFT_UPPER = _MID + 0.9 * _HALF

STAND_HEIGHT = 0.72
KNEE_HEIGHT_GAIN = 0.2  # m of pelvis drop per rad of mean knee flexion
PITCH_GAIN = 0.5
ROLL_GAIN = 0.5
HEAD_HEIGHT = 0.5  # head point above root at rest

L_KNEE, R_KNEE = 4, 5
L_ELBOW, R_ELBOW, L_HAND, R_HAND = 8, 9, 10, 11

_AXIS_SQ = np.sum(AXIS**2, axis=1)


def body_positions(joint_q: np.ndarray) -> np.ndarray:
    """Map joint angles (..., 12) to root-frame body points (..., 12, 3)."""
    q = np.asarray(joint_q, dtype=float)
    return REST_OFFSET + AXIS * q[..., :, None]


def joints_from_body(body_pos: np.ndarray) -> np.ndarray:
    """Invert :func:`body_positions` by projecting each point onto its axis."""
    d = np.asarray(body_pos, dtype=float) - REST_OFFSET
    return np.sum(d * AXIS, axis=-1) / _AXIS_SQ


def root_posture(joint_q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (height, roll, pitch) of the root implied by the joints."""
    q = np.asarray(joint_q, dtype=float)
    z = STAND_HEIGHT - KNEE_HEIGHT_GAIN * 0.5 * (q[..., L_KNEE] + q[..., R_KNEE])
    return z, ROLL_GAIN * q[..., 1], PITCH_GAIN * q[..., 0]


def root_posture_rates(joint_qd: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    qd = np.asarray(joint_qd, dtype=float)
    zd = -KNEE_HEIGHT_GAIN * 0.5 * (qd[..., L_KNEE] + qd[..., R_KNEE])
    return zd, ROLL_GAIN * qd[..., 1], PITCH_GAIN * qd[..., 0]


def mirror_joints(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return MIRROR_SIGN * q[..., MIRROR_PERM]


def outside_soft_limits(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.any((q < SOFT_LOWER) | (q > SOFT_UPPER), axis=-1)


def clamp_to_limits(q: np.ndarray) -> np.ndarray:
    return np.clip(q, JOINT_LOWER, JOINT_UPPER)
