"""Symbolic 64x64 raster renderer and scene description types.

Floors are dark procedural patterns, objects are vertical cylinders painted
in a saturated palette with a class-specific two-tone pattern, and the sky is
a dim constant. The ego camera ray-casts from head height along the robot
heading; the exo camera is an orthographic top-down view. Pixels are
quantized to multiples of 1/255 so that uint8 storage is lossless.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from dualproc.core import RobotState
from dualproc.errors import InvalidArgumentError

H = W = 64

PALETTE = {
    "red": (0.95, 0.10, 0.10),
    "green": (0.10, 0.85, 0.20),
    "blue": (0.15, 0.35, 1.00),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.75, 0.20, 0.95),
    "orange": (1.00, 0.55, 0.05),
}
COLORS = tuple(PALETTE)

# footprint radius (m), height (m)
CLASS_GEOMETRY = {
    "chair": (0.30, 0.90),
    "table": (0.45, 0.70),
    "sofa": (0.50, 0.80),
    "box": (0.30, 0.50),
}
CLASSES = tuple(CLASS_GEOMETRY)
SITTABLE = ("chair", "sofa")
SEAT_HEIGHT = 0.45

FLOORS = {
    "checker_gray": ((0.18, 0.18, 0.18), (0.10, 0.10, 0.10), "checker"),
    "checker_blue": ((0.08, 0.10, 0.22), (0.04, 0.05, 0.12), "checker"),
    "stripes_brown": ((0.22, 0.14, 0.08), (0.14, 0.09, 0.05), "stripes"),
    "tiles_green": ((0.08, 0.18, 0.10), (0.03, 0.10, 0.05), "tiles"),
    "plain_dark": ((0.12, 0.12, 0.14), (0.12, 0.12, 0.14), "checker"),
    "stripes_gray": ((0.20, 0.20, 0.22), (0.07, 0.07, 0.08), "stripes"),
}
FLOOR_NAMES = tuple(FLOORS)

SKY = np.array([0.10, 0.10, 0.16])
ROBOT_BODY = np.array([0.0, 0.0, 0.0])
ROBOT_NOSE = np.array([0.45, 0.45, 0.45])
ROBOT_RADIUS = 0.22


@dataclass(frozen=True)
class SceneObject:
    cls: str
    color: str
    position: tuple[float, float]
    yaw: float = 0.0
    radius: Optional[float] = None

    @property
    def footprint(self) -> float:
        return CLASS_GEOMETRY[self.cls][0] if self.radius is None else self.radius

    @property
    def height(self) -> float:
        return CLASS_GEOMETRY[self.cls][1]


@dataclass(frozen=True)
class EgoCamera:
    height_above_root: float = 0.5
    pitch_down: float = np.deg2rad(20.0)
    hfov: float = np.deg2rad(90.0)


@dataclass(frozen=True)
class ExoCamera:
    """Orthographic top-down camera; image 'up' points along ``yaw``."""

    center: tuple[float, float] = (0.0, 0.0)
    half_extent: float = 4.0
    yaw: float = 0.0


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()
    floor_texture: str = "checker_gray"
    ego: EgoCamera = field(default_factory=EgoCamera)
    exo: ExoCamera = field(default_factory=ExoCamera)

    def overlaps(self) -> bool:
        objs = self.objects
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                d = np.hypot(objs[i].position[0] - objs[j].position[0], objs[i].position[1] - objs[j].position[1])
                if d <= objs[i].footprint + objs[j].footprint:
                    return True
        return False

    def to_dict(self) -> dict:
        return {
            "objects": [asdict(o) for o in self.objects],
            "floor_texture": self.floor_texture,
            "ego": asdict(self.ego),
            "exo": asdict(self.exo),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(
            SceneObject(o["cls"], o["color"], tuple(o["position"]), o["yaw"], o["radius"]) for o in d["objects"]
        )
        exo = d["exo"]
        return cls(
            objs,
            d["floor_texture"],
            EgoCamera(**d["ego"]),
            ExoCamera(tuple(exo["center"]), exo["half_extent"], exo["yaw"]),
        )


def save_scene(path, scene: Scene) -> None:
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray  # (64, 64, 3) in [0, 1]
    view: str

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, a: np.ndarray, view: str) -> "Image":
        return cls(a.astype(np.float64) / 255.0, view)


def _quantize(px: np.ndarray) -> np.ndarray:
    return np.round(np.clip(px, 0.0, 1.0) * 255.0) / 255.0


def floor_color(texture: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    a, b, kind = FLOORS[texture]
    if kind == "checker":
        sel = (np.floor(x / 0.5) + np.floor(y / 0.5)) % 2 == 0
    elif kind == "stripes":
        sel = np.floor(x / 0.4) % 2 == 0
    else:
        sel = (np.abs((x % 1.0) - 0.5) > 0.05) & (np.abs((y % 1.0) - 0.5) > 0.05)
    return np.where(sel[..., None], np.array(a), np.array(b))


def _object_shade(obj: SceneObject, frac_height: np.ndarray) -> np.ndarray:
    """Class-specific vertical pattern; ``frac_height`` in [0, 1] along the object."""
    c = np.array(PALETTE[obj.color])
    if obj.cls == "chair":
        k = np.where(frac_height > 0.5, 0.6, 1.0)
    elif obj.cls == "table":
        k = np.where(frac_height > 0.8, 1.0, 0.35)
    elif obj.cls == "sofa":
        k = np.ones_like(frac_height)
    else:
        k = np.where(np.abs(frac_height - 0.5) < 0.1, 0.5, 1.0)
    return c * k[..., None]


def render_ego(scene: Scene, robot: RobotState) -> Image:
    cam = scene.ego
    yaw = robot.root.yaw
    origin = np.array([robot.root.position[0], robot.root.position[1], robot.root.position[2] + cam.height_above_root])
    cp, sp = np.cos(cam.pitch_down), np.sin(cam.pitch_down)
    fwd = np.array([cp * np.cos(yaw), cp * np.sin(yaw), -sp])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    up = np.cross(right, fwd)
    tx = np.tan(cam.hfov / 2.0)
    u = (2.0 * (np.arange(W) + 0.5) / W - 1.0) * tx
    v = (1.0 - 2.0 * (np.arange(H) + 0.5) / H) * tx
    d = fwd + u[None, :, None] * right + v[:, None, None] * up  # (H, W, 3)

    img = np.broadcast_to(SKY, (H, W, 3)).copy()
    depth = np.full((H, W), np.inf)
    down = d[..., 2] < -1e-9
    t_g = np.where(down, -origin[2] / np.where(down, d[..., 2], -1.0), np.inf)
    hit = np.isfinite(t_g)
    gx = origin[0] + t_g * d[..., 0]
    gy = origin[1] + t_g * d[..., 1]
    fc = floor_color(scene.floor_texture, np.where(hit, gx, 0.0), np.where(hit, gy, 0.0))
    img[hit] = fc[hit]
    depth[hit] = t_g[hit]

    dx, dy = d[..., 0], d[..., 1]
    a = dx * dx + dy * dy
    for obj in scene.objects:
        ox, oy = origin[0] - obj.position[0], origin[1] - obj.position[1]
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - obj.footprint**2
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / np.where(ok, 2.0 * a, 1.0)
        t2 = (-b + sq) / np.where(ok, 2.0 * a, 1.0)
        t = np.where(t1 > 1e-6, t1, t2)
        z = origin[2] + t * d[..., 2]
        zc = np.clip(z, 0.0, obj.height)
        sel = ok & (t > 1e-6) & (z >= 0.0) & (z <= obj.height) & (t < depth)
        img[sel] = _object_shade(obj, zc / obj.height)[sel]
        depth[sel] = t[sel]
        # flat lid, visible from above
        lid_ok = d[..., 2] < -1e-9
        t_lid = np.where(lid_ok, (obj.height - origin[2]) / np.where(lid_ok, d[..., 2], -1.0), np.inf)
        lx = origin[0] + t_lid * dx - obj.position[0]
        ly = origin[1] + t_lid * dy - obj.position[1]
        lid = lid_ok & (t_lid > 1e-6) & (lx * lx + ly * ly <= obj.footprint**2) & (t_lid < depth)
        img[lid] = _object_shade(obj, np.ones(lid.sum()))
        depth[lid] = t_lid[lid]
    return Image(_quantize(img), "ego")


def exo_grid(cam: ExoCamera) -> tuple[np.ndarray, np.ndarray]:
    """World x, y of every exo pixel centre."""
    s = 2.0 * cam.half_extent / W
    rows = (H / 2.0 - (np.arange(H) + 0.5)) * s
    cols = ((np.arange(W) + 0.5) - W / 2.0) * s
    fx, fy = np.cos(cam.yaw), np.sin(cam.yaw)
    rx, ry = np.sin(cam.yaw), -np.cos(cam.yaw)
    x = cam.center[0] + rows[:, None] * fx + cols[None, :] * rx
    y = cam.center[1] + rows[:, None] * fy + cols[None, :] * ry
    return x, y


def render_exo(scene: Scene, robot: RobotState) -> Image:
    x, y = exo_grid(scene.exo)
    img = floor_color(scene.floor_texture, x, y)
    for obj in scene.objects:
        px, py = x - obj.position[0], y - obj.position[1]
        r2 = px * px + py * py
        inside = r2 <= obj.footprint**2
        # half-disc toward the object's facing is painted with the top shade
        front = (px * np.cos(obj.yaw) + py * np.sin(obj.yaw)) > 0
        frac = np.where(front, 0.2, 0.9)
        img[inside] = _object_shade(obj, frac)[inside]
    rx, ry = robot.root.position[0], robot.root.position[1]
    d2 = (x - rx) ** 2 + (y - ry) ** 2
    img[d2 <= ROBOT_RADIUS**2] = ROBOT_BODY
    nx = rx + 0.8 * ROBOT_RADIUS * np.cos(robot.root.yaw)
    ny = ry + 0.8 * ROBOT_RADIUS * np.sin(robot.root.yaw)
    img[(x - nx) ** 2 + (y - ny) ** 2 <= (0.45 * ROBOT_RADIUS) ** 2] = ROBOT_NOSE
    return Image(_quantize(img), "exo")


def render(scene: Scene, robot: RobotState, view: str) -> Image:
    if view == "ego":
        return render_ego(scene, robot)
    if view == "exo":
        return render_exo(scene, robot)
    raise InvalidArgumentError(f"unknown view {view!r}")


def white_noise_image(seed, view: str = "ego") -> Image:
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0.0, 1.0, size=(H, W, 3)), view)
