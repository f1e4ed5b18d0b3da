"""Procedural demonstrations: scenes, kinematic motions, instructions, mixtures.

Motions come from a small pursuit integrator that produces root paths with
acceleration limits plus a speed-driven gait oscillation in the joints. One
"unique trajectory" fixes the motion geometry; its variants randomize object
appearance, distractors, floor, exo camera and instruction paraphrase, and
every second variant is mirrored.

Train and evaluation scenes use disjoint (target colour, target class)
combinations so that evaluation is visually unseen.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from dualproc import body
from dualproc.core import (
    DEFAULT_DT,
    DEFAULT_STRIDE,
    KinematicTrajectory,
    RobotState,
    mirror_trajectory,
    wrap_angle,
)
from dualproc.errors import ConfigError, GenerationError
from dualproc.render import (
    CLASSES,
    COLORS,
    FLOOR_NAMES,
    SEAT_HEIGHT,
    SITTABLE,
    EgoCamera,
    ExoCamera,
    Image,
    Scene,
    SceneObject,
    render_ego,
    render_exo,
    white_noise_image,
)

CATEGORIES = ("nav_towards", "nav_around", "locomotion", "sit", "reach")
NAV = ("nav_towards", "nav_around")
CLUTTER_LEVELS = ("objective", "distractor", "cluttered")
SPAWNS = ("front", "rear")

NAV_STANDOFF = 0.5
AROUND_RADIUS = 1.0
HOLD_AFTER_NAV = 0.6
MAX_DURATION = 15.0

# knee flexion that lowers the pelvis onto the seat
SIT_KNEE = (body.STAND_HEIGHT - SEAT_HEIGHT) / body.KNEE_HEIGHT_GAIN
SIT_POSE = np.zeros(12)
SIT_POSE[[2, 3]] = 0.8
SIT_POSE[[4, 5]] = SIT_KNEE
SIT_POSE[[6, 7]] = -0.3
SIT_POSE[0] = 0.2

REACH_POSES = {
    "raise_left": {8: 1.2, 10: 1.9},
    "raise_right": {9: 1.2, 11: 1.9},
    "raise_both": {8: 1.2, 9: 1.2, 10: 1.9, 11: 1.9},
    "reach_forward": {8: 0.9, 9: 0.9, 10: 1.0, 11: 1.0},
}
LOCOMOTION_KINDS = ("walk_forward", "run_forward", "turn_left", "turn_right")
BLIND_SIT_KINDS = ("sit_turn_left", "sit_turn_right")

_SWAP = {"left": "right", "right": "left", "turn_left": "turn_right", "turn_right": "turn_left",
         "raise_left": "raise_right", "raise_right": "raise_left",
         "sit_turn_left": "sit_turn_right", "sit_turn_right": "sit_turn_left",
         "clockwise": "counterclockwise", "counterclockwise": "clockwise"}


def heldout_combos() -> frozenset[tuple[str, str]]:
    """(colour, class) target combinations reserved for evaluation."""
    return frozenset((c, CLASSES[i % len(CLASSES)]) for i, c in enumerate(COLORS))


def combos_for(split: str, sittable_only: bool = False) -> list[tuple[str, str]]:
    held = heldout_combos()
    out = []
    for c in COLORS:
        for k in CLASSES:
            if sittable_only and k not in SITTABLE:
                continue
            if ((c, k) in held) == (split == "eval"):
                out.append((c, k))
    return out


# ---------------------------------------------------------------------------
# task specs


@dataclass(frozen=True)
class ObjectTarget:
    cls: str
    color: str
    distance: Optional[float] = None
    bearing: Optional[float] = None  # relative to the initial heading
    yaw: float = 0.0
    pace: float = 0.9  # m/s cruise speed of the approach
    direction: int = 1  # +1 counterclockwise, -1 clockwise (nav_around)
    arc: float = np.pi


@dataclass(frozen=True)
class MotionTarget:
    kind: str
    speed: float = 0.0
    yaw_rate: float = 0.0
    duration: float = 3.0


@dataclass(frozen=True)
class TaskSpec:
    category: str
    target: Union[ObjectTarget, MotionTarget]
    distractor_count: int = 0
    clutter_level: str = "objective"
    spawn_relation: str = "front"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise GenerationError(f"unknown category {self.category!r}")
        if self.category in NAV and not isinstance(self.target, ObjectTarget):
            raise GenerationError("navigation tasks need a target object")
        if isinstance(self.target, ObjectTarget) and self.category == "sit" and self.target.cls not in SITTABLE:
            raise GenerationError("sit target must be a sittable class")
        if self.clutter_level not in CLUTTER_LEVELS or self.spawn_relation not in SPAWNS:
            raise GenerationError("bad clutter level or spawn relation")

    @property
    def has_object(self) -> bool:
        return isinstance(self.target, ObjectTarget)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_type"] = type(self.target).__name__
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        tt = d.pop("target_type")
        target = ObjectTarget(**d.pop("target")) if tt == "ObjectTarget" else MotionTarget(**d.pop("target"))
        return cls(target=target, **d)


def mirror_task(task: TaskSpec) -> TaskSpec:
    t = task.target
    if isinstance(t, ObjectTarget):
        t = replace(t, bearing=None if t.bearing is None else -t.bearing, yaw=-t.yaw, direction=-t.direction)
    else:
        t = replace(t, kind=_SWAP.get(t.kind, t.kind), yaw_rate=-t.yaw_rate)
    return replace(task, target=t)


def target_position(task: TaskSpec) -> np.ndarray:
    t = task.target
    return np.array([t.distance * np.cos(t.bearing), t.distance * np.sin(t.bearing)])


def sample_task(
    category: str,
    rng: np.random.Generator,
    split: str = "train",
    spawn_relation: Optional[str] = None,
    clutter_level: Optional[str] = None,
    blind: bool = False,
) -> TaskSpec:
    """Draw the motion geometry and appearance of one task."""
    if spawn_relation is None:
        spawn_relation = "front" if category in ("sit", "nav_around") else str(rng.choice(SPAWNS))
    if clutter_level is None:
        clutter_level = str(rng.choice(CLUTTER_LEVELS))
    distractors = {"objective": 0, "distractor": int(rng.integers(1, 3)), "cluttered": int(rng.integers(5, 8))}[
        clutter_level
    ]
    if category == "locomotion":
        kind = str(rng.choice(LOCOMOTION_KINDS))
        speed = rng.uniform(1.6, 1.8) if kind == "run_forward" else rng.uniform(0.7, 0.9)
        yaw_rate = {"turn_left": 1.0, "turn_right": -1.0}.get(kind, 0.0) * rng.uniform(0.6, 0.8)
        target = MotionTarget(kind, float(speed), float(yaw_rate), float(rng.uniform(2.5, 4.0)))
        return TaskSpec(category, target, 0, "objective", "front")
    if category == "reach":
        kind = str(rng.choice(list(REACH_POSES)))
        return TaskSpec(category, MotionTarget(kind, duration=float(rng.uniform(1.4, 2.0))), 0, "objective", "front")
    if category == "sit" and blind:
        kind = str(rng.choice(BLIND_SIT_KINDS))
        return TaskSpec(category, MotionTarget(kind, duration=0.0), 0, "objective", "front")

    color, cls = _pick_combo(rng, split, sittable_only=category == "sit")
    if category == "sit":
        distance, bearing = rng.uniform(0.6, 1.0), rng.uniform(-0.5, 0.5)
        pace = rng.uniform(0.8, 1.0)
    elif category == "nav_around":
        distance, bearing = rng.uniform(1.5, 2.0), rng.uniform(-0.6, 0.6)
        pace = rng.uniform(1.1, 1.3)
    elif spawn_relation == "front":
        distance, bearing = rng.uniform(2.5, 4.0), rng.uniform(-np.pi / 4, np.pi / 4)
        pace = rng.uniform(0.8, 1.0)
    else:
        distance = rng.uniform(2.0, 3.0)
        bearing = rng.choice([-1.0, 1.0]) * rng.uniform(3 * np.pi / 4 + 0.05, np.pi)
        pace = rng.uniform(0.8, 1.0)
    target = ObjectTarget(
        cls,
        color,
        float(distance),
        float(bearing),
        yaw=float(bearing + rng.uniform(-0.3, 0.3)),
        pace=float(pace),
        direction=int(rng.choice([-1, 1])),
        arc=float(rng.uniform(np.pi, 1.25 * np.pi)),
    )
    return TaskSpec(category, target, distractors, clutter_level, spawn_relation)


def _pick_combo(rng, split, sittable_only=False) -> tuple[str, str]:
    combos = combos_for(split, sittable_only)
    return combos[int(rng.integers(len(combos)))]


def recolor_task(task: TaskSpec, rng: np.random.Generator, split: str) -> TaskSpec:
    """Same geometry, new target appearance."""
    if not task.has_object:
        return task
    color, cls = _pick_combo(rng, split, sittable_only=task.category == "sit")
    return replace(task, target=replace(task.target, color=color, cls=cls))


# ---------------------------------------------------------------------------
# scenes


def _exo_for(task: TaskSpec, rng) -> ExoCamera:
    if task.has_object:
        p = target_position(task)
        center = 0.5 * p
        half = 0.5 * float(np.linalg.norm(p)) + 2.0
    else:
        t = task.target
        reach = t.speed * t.duration
        center = np.array([0.5 * reach, 0.0])
        half = 0.5 * reach + 1.5
    jitter = rng.uniform(-0.3, 0.3)
    shift = rng.uniform(-0.3, 0.3, 2)
    return ExoCamera((float(center[0] + shift[0]), float(center[1] + shift[1])), float(half + 0.5), float(jitter))


def build_scene(task: TaskSpec, seed, split: str = "train") -> Scene:
    """Place the target (if any) and distractors; floor and cameras are randomized."""
    rng = np.random.default_rng(seed)
    floor = str(rng.choice(FLOOR_NAMES))
    ego = EgoCamera()
    if not task.has_object:
        return Scene((), floor, ego, _exo_for(task, rng))
    t = task.target
    if t.distance is None or t.bearing is None:
        if task.spawn_relation == "front":
            t = replace(t, distance=float(rng.uniform(2.5, 4.0)), bearing=float(rng.uniform(-np.pi / 4, np.pi / 4)))
        else:
            b = rng.choice([-1.0, 1.0]) * rng.uniform(3 * np.pi / 4 + 0.05, np.pi)
            t = replace(t, distance=float(rng.uniform(2.0, 3.0)), bearing=float(b), yaw=float(b))
        task = replace(task, target=t)
    rel = abs(wrap_angle(t.bearing))
    if (task.spawn_relation == "front" and rel > np.pi / 4 + 1e-9) or (
        task.spawn_relation == "rear" and rel < 3 * np.pi / 4 - 1e-9
    ):
        raise GenerationError("target bearing violates the spawn relation")
    pos = target_position(task)
    objects = [SceneObject(t.cls, t.color, (float(pos[0]), float(pos[1])), float(t.yaw))]
    n_extra = max(task.distractor_count, 5 if task.clutter_level == "cluttered" else 0)
    if task.clutter_level == "objective":
        n_extra = 0
    others = [(c, k) for c in COLORS for k in CLASSES if c != t.color]
    for _ in range(n_extra):
        for _attempt in range(200):
            c, k = others[int(rng.integers(len(others)))]
            r, a = rng.uniform(1.2, 5.0), rng.uniform(-np.pi, np.pi)
            cand = SceneObject(k, c, (float(r * np.cos(a)), float(r * np.sin(a))), float(rng.uniform(-np.pi, np.pi)))
            if _fits(cand, objects, pos):
                objects.append(cand)
                break
        else:
            raise GenerationError("could not place distractors without overlap")
    return Scene(tuple(objects), floor, ego, _exo_for(task, rng))


def _fits(cand: SceneObject, objects, target_pos) -> bool:
    p = np.array(cand.position)
    if np.linalg.norm(p) < cand.footprint + 0.6:
        return False
    # keep the target's approach ring free so the target is reachable
    if np.linalg.norm(p - target_pos) < cand.footprint + 1.3:
        return False
    return all(np.linalg.norm(p - np.array(o.position)) > cand.footprint + o.footprint + 0.1 for o in objects)


def mirror_scene(scene: Scene) -> Scene:
    objs = tuple(replace(o, position=(o.position[0], -o.position[1]), yaw=-o.yaw) for o in scene.objects)
    exo = ExoCamera((scene.exo.center[0], -scene.exo.center[1]), scene.exo.half_extent, -scene.exo.yaw)
    return Scene(objs, scene.floor_texture, scene.ego, exo)


# ---------------------------------------------------------------------------
# motion generation


class _Walker:
    """Accumulates root path and joint poses at 50 Hz with acceleration limits."""

    ACC = 2.5  # m/s^2
    YAW_ACC = 8.0  # rad/s^2

    def __init__(self, phase: float = 0.0, dt: float = DEFAULT_DT):
        self.dt = dt
        self.x = self.y = self.yaw = 0.0
        self.v = self.w = 0.0
        self.phase = phase
        self.pose = np.zeros(12)
        self.rows: list[tuple] = []
        self._push()

    def _gait(self) -> np.ndarray:
        a = min(abs(self.v) / 1.0 + 0.3 * abs(self.w), 1.5)
        s = np.sin(self.phase)
        g = np.zeros(12)
        g[0] = 0.08 * min(abs(self.v), 2.0)
        g[2], g[3] = 0.4 * a * s, -0.4 * a * s
        g[4], g[5] = 0.1 * a + 0.45 * a * max(0.0, s), 0.1 * a + 0.45 * a * max(0.0, -s)
        g[6], g[7] = 0.3 * a * s, -0.3 * a * s
        g[8], g[9] = -0.2 * a * s, 0.2 * a * s
        return g

    def _push(self):
        q = body.clamp_to_limits(self.pose + self._gait())
        self.rows.append((self.x, self.y, self.yaw, self.v * np.cos(self.yaw), self.v * np.sin(self.yaw), self.w, q))

    def step(self, v_des: float, w_des: float, pose: Optional[np.ndarray] = None):
        dt = self.dt
        self.v += float(np.clip(v_des - self.v, -self.ACC * dt, self.ACC * dt))
        self.w += float(np.clip(w_des - self.w, -self.YAW_ACC * dt, self.YAW_ACC * dt))
        self.x += self.v * np.cos(self.yaw) * dt
        self.y += self.v * np.sin(self.yaw) * dt
        self.yaw += self.w * dt
        stride_freq = 1.2 * min(abs(self.v), 2.0) + 0.6 * min(abs(self.w), 2.0)
        self.phase += 2 * np.pi * stride_freq * dt
        if pose is not None:
            self.pose = np.asarray(pose, dtype=float)
        self._push()

    def hold(self, seconds: float):
        for _ in range(int(round(seconds / self.dt))):
            self.step(0.0, 0.0)

    @property
    def t(self) -> float:
        return (len(self.rows) - 1) * self.dt

    def check(self):
        if self.t > MAX_DURATION:
            raise GenerationError("motion did not complete within the time limit")

    def trajectory(self, category: str, id: str = "") -> KinematicTrajectory:
        n = len(self.rows)
        q = np.stack([r[6] for r in self.rows])
        qd = np.zeros_like(q)
        qd[1:] = (q[1:] - q[:-1]) / self.dt
        states = [
            RobotState.from_joints(q[i], xy=(r[0], r[1]), yaw=r[2], joint_qd=qd[i], lin_vel_xy=(r[3], r[4]), yaw_rate=r[5])
            for i, r in enumerate(self.rows)
        ]
        assert len(states) == n
        return KinematicTrajectory.from_states(states, self.dt, category, id)


def _heading_to(w: _Walker, p) -> tuple[float, float]:
    d = np.array(p) - (w.x, w.y)
    return float(np.linalg.norm(d)), float(wrap_angle(np.arctan2(d[1], d[0]) - w.yaw))


def _turn_to(w: _Walker, yaw_goal: float, rate: float = 2.5, pose=None):
    # yaw_goal is unwrapped so the turn direction is explicit
    while True:
        err = float(yaw_goal - w.yaw)
        if abs(err) < 0.02 and abs(w.w) < 0.15:
            return
        # braking-distance profile under the yaw acceleration limit
        w_des = np.sign(err) * min(rate, np.sqrt(2.0 * 0.8 * w.YAW_ACC * abs(err)))
        w.step(0.0, float(w_des), pose)
        w.check()


def _approach(w: _Walker, goal, standoff: float, pace: float):
    dist, err = _heading_to(w, goal)
    if abs(err) > 0.5:
        _turn_to(w, w.yaw + err, rate=1.5)
    while True:
        dist, err = _heading_to(w, goal)
        gap = dist - standoff
        # overshooting a point goal flips the bearing; settle instead of circling
        arrived = gap < 0.015 or (dist < 0.2 and np.cos(err) < 0.5)
        if arrived and abs(w.v) < 0.1:
            return
        if arrived:
            w.step(0.0, 0.0)
            continue
        v_des = min(pace, np.sqrt(2.0 * 0.8 * w.ACC * max(gap, 0.0))) * max(0.0, np.cos(err))
        w_des = float(np.clip(3.0 * err, -1.5, 1.5)) if dist > 0.15 else 0.0
        w.step(v_des, w_des)
        w.check()


def _nav_towards(task, w: _Walker):
    goal = target_position(task)
    _approach(w, goal, NAV_STANDOFF, task.target.pace)
    for _ in range(int(round(HOLD_AFTER_NAV / w.dt))):
        _, err = _heading_to(w, goal)
        w.step(0.0, float(np.clip(3.0 * err, -1.0, 1.0)))


def _nav_around(task, w: _Walker):
    t = task.target
    c = target_position(task)
    _approach(w, c, AROUND_RADIUS, t.pace)
    s = float(t.direction)
    start_ang = np.arctan2(w.y - c[1], w.x - c[0])
    swept, prev = 0.0, start_ang
    while swept < t.arc:
        rel = np.array([w.x - c[0], w.y - c[1]])
        r = np.linalg.norm(rel)
        ang = np.arctan2(rel[1], rel[0])
        swept += s * wrap_angle(ang - prev)
        prev = ang
        desired = ang + s * np.pi / 2 + s * 0.8 * (r - AROUND_RADIUS)
        err = float(wrap_angle(desired - w.yaw))
        w.step(t.pace, s * t.pace / AROUND_RADIUS + 3.0 * err)
        w.check()
    w.hold(0.3)


def _sit_down(w: _Walker, seconds: float = 0.6):
    start = w.pose.copy()
    n = int(round(seconds / w.dt))
    for k in range(1, n + 1):
        u = k / n
        u = u * u * (3 - 2 * u)
        w.step(0.0, 0.0, start + u * (SIT_POSE - start))
    w.hold(0.3)


def _sit(task, w: _Walker):
    t = task.target
    if isinstance(t, MotionTarget):
        _turn_to(w, np.pi if t.kind == "sit_turn_left" else -np.pi, rate=3.5)
    else:
        _approach(w, target_position(task), 0.0, t.pace)
        _turn_to(w, w.yaw + wrap_angle(t.yaw + np.pi - w.yaw), rate=3.5)
    _sit_down(w)


def _locomotion(task, w: _Walker):
    t = task.target
    for _ in range(int(round(t.duration / w.dt))):
        w.step(t.speed, t.yaw_rate)


def _reach(task, w: _Walker):
    t = task.target
    goal = np.zeros(12)
    for j, v in REACH_POSES[t.kind].items():
        goal[j] = v
    n = int(round(0.5 / w.dt))
    for k in range(1, n + 1):
        u = k / n
        w.step(0.0, 0.0, u * u * (3 - 2 * u) * goal)
    w.hold(max(t.duration - 0.5, 0.5))


_GENERATORS = {
    "nav_towards": _nav_towards,
    "nav_around": _nav_around,
    "sit": _sit,
    "locomotion": _locomotion,
    "reach": _reach,
}


def generate_motion(task: TaskSpec, scene: Scene, seed) -> KinematicTrajectory:
    """Category-specific kinematics at 50 Hz starting from the origin facing +x."""
    if task.has_object:
        if not scene.objects:
            raise GenerationError("task needs a target object but the scene is empty")
        tgt = scene.objects[0]
        pos = target_position(task)
        if np.hypot(tgt.position[0] - pos[0], tgt.position[1] - pos[1]) > 1e-9:
            raise GenerationError("scene target does not match the task geometry")
        for o in scene.objects[1:]:
            if np.hypot(o.position[0] - pos[0], o.position[1] - pos[1]) < o.footprint + 1.0:
                raise GenerationError("target is enclosed by clutter")
    rng = np.random.default_rng(seed)
    w = _Walker(phase=float(rng.uniform(0, 2 * np.pi)))
    _GENERATORS[task.category](task, w)
    return w.trajectory(task.category)


# ---------------------------------------------------------------------------
# instructions

TEMPLATES = {
    "nav_towards": [
        "walk towards the {color} {cls}",
        "go to the {color} {cls}",
        "head over to the {color} {cls}",
        "approach the {color} {cls}",
        "move to the {color} {cls}",
    ],
    "nav_around": [
        "walk around the {color} {cls} {turn}",
        "circle the {color} {cls} {turn}",
        "go around the {color} {cls} {turn}",
    ],
    "sit": [
        "go sit on the {color} {cls}",
        "sit down on the {color} {cls}",
        "take a seat on the {color} {cls}",
        "walk to the {color} {cls} and sit",
    ],
    "blind_sit": [
        "turn around to the {side} and sit down behind you",
        "sit down behind you turning {side}",
        "spin to your {side} and take a seat behind you",
    ],
    "walk_forward": ["walk forward slowly to the front", "take a slow walk to the front", "stroll straight ahead to the front"],
    "run_forward": ["run forward fast to the front", "jog quickly to the front", "sprint straight to the front"],
    "turn_left": ["walk forward while turning left", "curve to the left as you walk", "turn left while walking"],
    "turn_right": ["walk forward while turning right", "curve to the right as you walk", "turn right while walking"],
    "raise_left": ["raise your left hand", "lift the left arm up", "put your left hand up"],
    "raise_right": ["raise your right hand", "lift the right arm up", "put your right hand up"],
    "raise_both": ["raise both hands in front", "lift both arms up in front", "put both hands up in front"],
    "reach_forward": ["reach forward with both hands to the front", "stretch your arms to the front", "reach out to the front"],
}
CUE_WORDS = ("left", "right", "front", "behind")


def spatial_cue(task: TaskSpec) -> str:
    t = task.target
    if isinstance(t, ObjectTarget):
        b = wrap_angle(t.bearing)
        if abs(b) > 3 * np.pi / 4:
            return "behind"
        if b > np.deg2rad(15):
            return "left"
        if b < -np.deg2rad(15):
            return "right"
        return "front"
    if "left" in t.kind:
        return "left"
    if "right" in t.kind:
        return "right"
    return "front"


def _cue_phrase(cue: str) -> str:
    return {"behind": "behind you", "front": "in front"}.get(cue, f"on the {cue}")


def annotate_instruction(task: TaskSpec, scene: Scene, blind: bool, seed) -> str:
    rng = np.random.default_rng(seed)
    t = task.target
    cue = spatial_cue(task)
    if isinstance(t, ObjectTarget):
        bank = TEMPLATES[task.category]
        turn = "clockwise" if t.direction < 0 else "counterclockwise"
        text = bank[int(rng.integers(len(bank)))].format(color=t.color, cls=t.cls, turn=turn)
        if blind or rng.random() < 0.5:
            text = f"{text} {_cue_phrase(cue)}"
    elif task.category == "sit":
        bank = TEMPLATES["blind_sit"]
        text = bank[int(rng.integers(len(bank)))].format(side=cue)
    else:
        bank = TEMPLATES[t.kind]
        text = bank[int(rng.integers(len(bank)))]
    if blind and not any(w in CUE_WORDS for w in text.split()):
        text = f"{text} {_cue_phrase(cue)}"
    return text


def mirror_instruction(text: str) -> str:
    return re.sub(
        r"\b(left|right|clockwise|counterclockwise)\b",
        lambda m: _SWAP[m.group(1)],
        text,
    )


# ---------------------------------------------------------------------------
# records


@dataclass
class DemoRecord:
    traj: KinematicTrajectory
    instruction: str
    task: TaskSpec
    scene: Scene
    blind: bool
    seed: int
    motion_seed: int = 0
    mirrored: bool = False
    images: Optional[np.ndarray] = field(default=None, repr=False)  # (K, 2, 64, 64, 3) uint8

    @property
    def n_ticks(self) -> int:
        return len(self.traj) // DEFAULT_STRIDE

    def tick_frame(self, k: int) -> int:
        return k * DEFAULT_STRIDE

    def render_images(self) -> np.ndarray:
        """Ego and exo views at every System-2 tick, rendered from (scene, traj)."""
        out = np.empty((self.n_ticks, 2, 64, 64, 3), dtype=np.uint8)
        for k in range(self.n_ticks):
            s = self.traj.frame(self.tick_frame(k))
            out[k, 0] = render_ego(self.scene, s).to_uint8()
            out[k, 1] = render_exo(self.scene, s).to_uint8()
        return out

    def image_pair(self, k: int) -> tuple[Image, Image]:
        """Images for tick k; blind records substitute seeded white noise."""
        if self.blind:
            return noise_pair(self.seed, k)
        if self.images is not None:
            return Image.from_uint8(self.images[k, 0], "ego"), Image.from_uint8(self.images[k, 1], "exo")
        s = self.traj.frame(self.tick_frame(k))
        return render_ego(self.scene, s), render_exo(self.scene, s)


def noise_seed(record_seed: int, tick: int, view: int) -> list[int]:
    return [int(record_seed), int(tick), int(view)]


def noise_pair(record_seed: int, tick: int) -> tuple[Image, Image]:
    return (
        white_noise_image(noise_seed(record_seed, tick, 0), "ego"),
        white_noise_image(noise_seed(record_seed, tick, 1), "exo"),
    )


def synthesize_demo(
    task: TaskSpec,
    seed: int,
    blind: bool,
    motion_seed: Optional[int] = None,
    mirrored: bool = False,
    split: str = "train",
    with_images: bool = False,
) -> DemoRecord:
    """Scene + motion + instruction (+ images) for one record; mirrored if asked."""
    motion_seed = seed if motion_seed is None else motion_seed
    scene = build_scene(task, seed, split)
    traj = generate_motion(task, scene, motion_seed)
    text = annotate_instruction(task, scene, blind, seed)
    if mirrored:
        traj = mirror_trajectory(traj)
        scene = mirror_scene(scene)
        task = mirror_task(task)
        text = mirror_instruction(text)
    traj = KinematicTrajectory(traj.data, traj.dt, task.category, f"rec{seed}")
    rec = DemoRecord(traj, text, task, scene, blind, int(seed), int(motion_seed), mirrored)
    if with_images and not blind:
        rec.images = rec.render_images()
    return rec


# ---------------------------------------------------------------------------
# mixtures


DEFAULT_MIXTURE = {
    "vl_trajectories": {"nav_towards": 32, "nav_around": 16, "sit": 16},
    "vl_variants": 8,
    "blind_trajectories": {"locomotion": 40, "reach": 20, "sit": 20},
    "blind_variants": 4,
    "split": "train",
}


@dataclass
class Dataset:
    records: list[DemoRecord]
    mixture_meta: dict[str, int]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def blind_fraction(self) -> float:
        return sum(r.blind for r in self.records) / max(len(self.records), 1)


def _meta_key(category: str, blind: bool) -> str:
    return f"{category}/{'blind' if blind else 'vl'}"


def _check_counts(d, name) -> dict[str, int]:
    d = dict(d or {})
    for k, v in d.items():
        if k not in CATEGORIES or not isinstance(v, int) or v < 0:
            raise ConfigError(f"{name}: bad entry {k!r}: {v!r}")
    return d


def plan_mixture(config: Optional[dict], seed: int) -> list[dict]:
    """Deterministic list of record recipes (task, seeds, flags) without synthesis."""
    cfg = dict(DEFAULT_MIXTURE if config is None else config)
    vl = _check_counts(cfg.get("vl_trajectories"), "vl_trajectories")
    bl = _check_counts(cfg.get("blind_trajectories"), "blind_trajectories")
    nv, nb = int(cfg.get("vl_variants", 1)), int(cfg.get("blind_variants", 1))
    split = cfg.get("split", "train")
    if nv < 1 or nb < 1:
        raise ConfigError("variants per trajectory must be >= 1")
    if any(k in ("locomotion", "reach") for k, v in vl.items() if v):
        raise ConfigError("locomotion and reach have no target object; list them as blind")
    plan = []
    counter = 0
    for blind, table, n_var in ((False, vl, nv), (True, bl, nb)):
        for cat in CATEGORIES:
            for i in range(table.get(cat, 0)):
                traj_seed = int(np.random.default_rng([seed, int(blind), CATEGORIES.index(cat), i]).integers(2**31))
                rng = np.random.default_rng(traj_seed)
                spawn = None
                if cat == "nav_towards":
                    spawn = SPAWNS[i % 2]
                base = sample_task(cat, rng, split, spawn_relation=spawn, blind=blind)
                for j in range(n_var):
                    vr = np.random.default_rng([traj_seed, j])
                    task = recolor_task(base, vr, split) if j else base
                    if task.has_object:
                        lvl = str(vr.choice(CLUTTER_LEVELS))
                        nd = {"objective": 0, "distractor": int(vr.integers(1, 3)), "cluttered": int(vr.integers(5, 8))}[lvl]
                        task = replace(task, clutter_level=lvl, distractor_count=nd)
                    plan.append(
                        dict(
                            task=task,
                            seed=int(seed) * 100_000 + counter,
                            motion_seed=traj_seed,
                            blind=blind,
                            mirrored=bool(j % 2),
                            split=split,
                        )
                    )
                    counter += 1
    return plan


def assemble_mixture(config: Optional[dict] = None, seed: int = 0, with_images: bool = False) -> Dataset:
    """Build every planned record in seed order and tally the mixture."""
    plan = plan_mixture(config, seed)
    records = [
        synthesize_demo(p["task"], p["seed"], p["blind"], p["motion_seed"], p["mirrored"], p["split"], with_images)
        for p in plan
    ]
    meta: dict[str, int] = {}
    for r in records:
        k = _meta_key(r.task.category, r.blind)
        meta[k] = meta.get(k, 0) + 1
    return Dataset(records, meta, dict(DEFAULT_MIXTURE if config is None else config), seed)


# ---------------------------------------------------------------------------
# persistence


def _record_header(r: DemoRecord) -> dict:
    return {
        "instruction": r.instruction,
        "task": r.task.to_dict(),
        "scene": r.scene.to_dict(),
        "blind": r.blind,
        "seed": r.seed,
        "motion_seed": r.motion_seed,
        "mirrored": r.mirrored,
        "dt": r.traj.dt,
        "category": r.traj.category,
        "id": r.traj.id,
        "mirror_table_version": body.MIRROR_TABLE_VERSION,
    }


def save_dataset(ds: Dataset, root, images: bool = True) -> None:
    root = Path(root)
    (root / "records").mkdir(parents=True, exist_ok=True)
    files = []
    for i, r in enumerate(ds.records):
        name = f"records/rec_{i:05d}.npz"
        arrays = {"header": np.array(json.dumps(_record_header(r), sort_keys=True)), "frames": r.traj.data}
        if images and not r.blind:
            arrays["images"] = r.images if r.images is not None else r.render_images()
        np.savez_compressed(root / name, **arrays)
        files.append({"file": name, "seed": r.seed, "category": r.task.category, "blind": r.blind})
    manifest = {"config": ds.config, "seed": ds.seed, "mixture_meta": ds.mixture_meta, "records": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def load_record(path, load_images: bool = False) -> DemoRecord:
    with np.load(path, allow_pickle=False) as z:
        h = json.loads(str(z["header"]))
        frames = z["frames"]
        imgs = z["images"] if (load_images and "images" in z.files) else None
    traj = KinematicTrajectory(frames, h["dt"], h["category"], h["id"])
    return DemoRecord(
        traj,
        h["instruction"],
        TaskSpec.from_dict(h["task"]),
        Scene.from_dict(h["scene"]),
        h["blind"],
        h["seed"],
        h["motion_seed"],
        h["mirrored"],
        imgs,
    )


def load_dataset(root, load_images: bool = False) -> Dataset:
    root = Path(root)
    m = json.loads((root / "manifest.json").read_text())
    recs = [load_record(root / f["file"], load_images) for f in m["records"]]
    return Dataset(recs, m["mixture_meta"], m["config"], m["seed"])
