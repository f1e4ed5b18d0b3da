"""Closed-loop evaluation: ablation configs, benchmark suite, success judging,
result tables, latent-trace replay and the interactive console.

The closed loop runs at the sim rate (50 Hz). Every fifth step the current
scene is rendered from the live robot state, encoded, and pushed through the
System-2 prior; the student is conditioned on the prior mean until the next
tick. Episodes end at their time limit or when the robot tips over.
"""

from __future__ import annotations

import csv
import io
import json
import re
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO

import numpy as np
import torch

from dualproc import body
from dualproc import datagen as D
from dualproc.core import DEFAULT_DT, DEFAULT_STRIDE, RobotState, wrap_angle
from dualproc.errors import ConfigError, IncompatibilityError, InvalidArgumentError
from dualproc.perception import Perception
from dualproc.render import CLASSES, COLORS, SITTABLE, Scene, render_ego, render_exo
from dualproc.sim import ORI_TERMINATION, BatchSim, orientation_gap, sample_dr
from dualproc.student import DaggerConfig, StudentPolicy, student_obs_batch
from dualproc.system2 import S2Config, System2Model, prior_sequence

VARIANTS = ("FULL", "ND", "NE", "NVL", "NLS", "NS")

NAV_TOLERANCE = 0.5  # m from the standoff ring
SIT_TOLERANCE = 0.3  # m from the seat point
SIT_MAX_HEIGHT = 0.5
HEADING_TOLERANCE = np.deg2rad(30.0)
SPEED_TOLERANCE = 0.5  # fraction of the commanded speed
LOCOMOTION_WINDOW = 2.0  # s
REACH_RMS = 0.1  # rad
REACH_HOLD = 0.5  # s
AROUND_MIN_ARC = 0.75  # fraction of the requested arc

DR_STREAM = 7919


def derive_seed(master: int, *names) -> int:
    """Stable 32-bit seed for a named sub-stream of a master seed."""
    keys = [int(master)] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass(frozen=True)
class PipelineConfig:
    variant: str
    system2: S2Config
    dagger: DaggerConfig
    conditioning: str  # "latent" (System-2 prior) or "tokens" (raw perception tokens)

    @property
    def needs_system2(self) -> bool:
        return self.conditioning == "latent"

    def system2_key(self) -> Optional[str]:
        """Variants with identical System-2 configs share one trained model."""
        return json.dumps(asdict(self.system2), sort_keys=True) if self.needs_system2 else None


def make_ablation_config(
    tag: str, system2: Optional[dict] = None, dagger: Optional[dict] = None
) -> PipelineConfig:
    """Pipeline configuration of one ablation variant on top of shared base settings."""
    if tag not in VARIANTS:
        raise InvalidArgumentError(f"unknown ablation variant {tag!r}; expected one of {', '.join(VARIANTS)}")
    s2 = S2Config.from_dict(system2)
    dg = DaggerConfig.from_dict(dagger)
    cond = "latent"
    if tag == "ND":
        s2 = replace(s2, beta2=0.0, use_discriminator=False)
    elif tag == "NE":
        s2 = replace(s2, use_encoder=False)
    elif tag == "NVL":
        cond = "tokens"
    elif tag == "NLS":
        dg = replace(dg, sample_latent=False)
    elif tag == "NS":
        s2 = replace(s2, sample_posterior=False, use_kl=False)
        dg = replace(dg, sample_latent=False)
    return PipelineConfig(tag, s2, dg, cond)


# ---------------------------------------------------------------------------
# suite definition


@dataclass(frozen=True)
class SuiteTask:
    label: str
    environment: str
    category: str
    spawn_relation: str = "front"
    clutter_level: str = "objective"
    blind: bool = False

    @property
    def id(self) -> str:
        return self.label if self.environment == "-" else f"{self.label}/{self.environment}"


DEFAULT_TASKS: tuple[SuiteTask, ...] = (
    *(
        SuiteTask(label, env.capitalize(), "nav_towards", spawn, env)
        for env in D.CLUTTER_LEVELS
        for label, spawn in (("VNF", "front"), ("VNR", "rear"))
    ),
    SuiteTask("VNS", "-", "sit"),
    SuiteTask("Sit", "-", "sit", blind=True),
    SuiteTask("Reach", "-", "reach", blind=True),
    SuiteTask("Locomotion", "-", "locomotion", blind=True),
)


@dataclass(frozen=True)
class SuiteConfig:
    tasks: tuple[SuiteTask, ...] = DEFAULT_TASKS
    runs_per_task: int = 20
    seed: int = 0
    unseen: bool = True

    def __post_init__(self):
        if self.runs_per_task < 1:
            raise ConfigError("runs_per_task must be >= 1")
        if not self.tasks:
            raise ConfigError("suite has no tasks")

    @classmethod
    def from_dict(cls, d: Optional[dict], seed: int = 0) -> "SuiteConfig":
        d = dict(d or {})
        unknown = set(d) - {"tasks", "runs_per_task", "unseen"}
        if unknown:
            raise ConfigError(f"unknown suite config keys: {sorted(unknown)}")
        tasks = d.get("tasks", "default")
        if tasks == "default":
            tasks = DEFAULT_TASKS
        else:
            by_id = {t.id: t for t in DEFAULT_TASKS}
            missing = [t for t in tasks if t not in by_id]
            if missing:
                raise ConfigError(f"unknown suite tasks: {missing}")
            tasks = tuple(by_id[t] for t in tasks)
        return cls(tasks, int(d.get("runs_per_task", 20)), int(seed), bool(d.get("unseen", True)))


@dataclass(frozen=True)
class EpisodeSpec:
    task_id: str
    task: D.TaskSpec
    scene: Scene
    instruction: str
    seed: int
    max_steps: int
    blind: bool = False


def episode_time_limit(task: D.TaskSpec) -> float:
    if task.category in D.NAV:
        return 9.0
    if task.category == "sit":
        return 8.0 if task.has_object else 5.0
    if task.category == "locomotion":
        return task.target.duration
    return task.target.duration + 1.5


def episode_steps(task: D.TaskSpec) -> int:
    """Time limit in sim steps, a whole number of System-2 ticks."""
    ticks = int(round(episode_time_limit(task) / (DEFAULT_DT * DEFAULT_STRIDE)))
    return max(ticks, 1) * DEFAULT_STRIDE


def make_episode(task: SuiteTask, index: int, master_seed: int, unseen: bool = True) -> EpisodeSpec:
    """Deterministic task instance number ``index`` of a suite task."""
    seed = derive_seed(master_seed, "episode", task.id, index)
    rng = np.random.default_rng(seed)
    split = "eval" if unseen else "train"
    spec = D.sample_task(task.category, rng, split, task.spawn_relation, task.clutter_level, blind=task.blind)
    scene = D.build_scene(spec, seed, split)
    text = D.annotate_instruction(spec, scene, task.blind, seed)
    steps = episode_steps(spec)
    return EpisodeSpec(task.id, spec, scene, text, seed, steps, task.blind)


def suite_episodes(suite: SuiteConfig) -> list[EpisodeSpec]:
    return [make_episode(t, i, suite.seed, suite.unseen) for t in suite.tasks for i in range(suite.runs_per_task)]


# ---------------------------------------------------------------------------
# models and the closed loop


@dataclass
class Models:
    perception: Perception
    student: StudentPolicy
    system2: Optional[System2Model] = None
    variant: str = "FULL"

    def check(self) -> None:
        kind = self.student.cond_kind
        if kind == "latent":
            if self.system2 is None:
                raise ConfigError(f"{self.variant}: latent-conditioned student needs a System-2 model")
            if self.system2.perception_checksum != self.perception.checksum:
                raise IncompatibilityError(f"{self.variant}: System-2 model was trained with other perception encoders")
            if self.student.source_checksum != self.system2.checksum():
                raise IncompatibilityError(f"{self.variant}: student was distilled from a different System-2 model")
            if self.student.cond_dim != self.system2.cfg.d_z:
                raise IncompatibilityError(f"{self.variant}: latent width mismatch")
        elif kind == "tokens":
            if self.student.source_checksum != self.perception.checksum:
                raise IncompatibilityError(f"{self.variant}: student was trained on other perception tokens")
        else:
            raise ConfigError(f"unknown conditioning kind {kind!r}")


@dataclass
class EpisodeResult:
    task_id: str
    seed: int
    variant: str
    success: bool
    termination_reason: Optional[str]
    metrics: dict
    latent_trace: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "variant": self.variant,
            "success": self.success,
            "termination_reason": self.termination_reason,
            "metrics": self.metrics,
        }


def observation_tokens(perception: Perception, specs: Sequence[EpisodeSpec], frames: np.ndarray) -> np.ndarray:
    """(n, 3, d) text / ego / exo tokens rendered from the live robot states."""
    px = np.empty((len(specs), 2, 64, 64, 3))
    text = np.empty((len(specs), perception.d_model))
    for j, (spec, f) in enumerate(zip(specs, frames)):
        s = RobotState.from_flat(f)
        px[j, 0] = render_ego(spec.scene, s).pixels
        px[j, 1] = render_exo(spec.scene, s).pixels
        text[j] = perception.encode_text(spec.instruction)
    img = perception.encode_images(px)
    return np.concatenate([text[:, None], img], axis=1)


def condition_from_tokens(models: Models, tokens: np.ndarray) -> np.ndarray:
    if models.student.cond_kind == "tokens":
        return tokens.reshape(len(tokens), -1)
    mu, _ = prior_sequence(models.system2, tokens)
    return mu


def run_episodes(
    models: Models,
    specs: Sequence[EpisodeSpec],
    conditioning: Optional[Sequence[np.ndarray]] = None,
    on_tick: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
) -> list[EpisodeResult]:
    """Run episodes side by side in one batched simulator.

    ``conditioning`` replays recorded per-tick conditioning open loop instead of
    rendering and encoding. ``on_tick(step, active_rows, frames)`` is called at
    every System-2 tick.
    """
    models.check()
    n = len(specs)
    if n == 0:
        return []
    sim = BatchSim(n)
    for i, spec in enumerate(specs):
        sim.reset(i, RobotState.standing(), sample_dr([spec.seed, DR_STREAM]))
    limits = np.array([s.max_steps for s in specs])
    horizon = int(limits.max())
    xy = np.zeros((n, horizon + 1, 2))
    yaw = np.zeros((n, horizon + 1))
    q = np.zeros((n, horizon + 1, 12))
    xy[:, 0], yaw[:, 0], q[:, 0] = sim.frames[:, :2], sim.frames[:, 3], sim.frames[:, 42:54]
    end = limits.copy()
    alive = np.ones(n, bool)
    tipped = np.zeros(n, bool)
    cond = np.zeros((n, models.student.cond_dim))
    traces: list[list[np.ndarray]] = [[] for _ in range(n)]
    with torch.no_grad():
        for t in range(horizon):
            active = alive & (t < limits)
            if not active.any():
                break
            if t % DEFAULT_STRIDE == 0:
                rows = np.flatnonzero(active)
                tick = t // DEFAULT_STRIDE
                if conditioning is not None:
                    for i in rows:
                        if tick >= len(conditioning[i]):
                            raise InvalidArgumentError("replayed conditioning is shorter than the episode")
                        cond[i] = conditioning[i][tick]
                else:
                    toks = observation_tokens(models.perception, [specs[i] for i in rows], sim.frames[rows])
                    cond[rows] = condition_from_tokens(models, toks)
                for i in rows:
                    traces[i].append(cond[i].copy())
                if on_tick is not None:
                    on_tick(t, rows, sim.frames)
            acts = models.student.act(student_obs_batch(sim.frames, sim.prev_action), cond)
            sim.step(acts)
            rows = np.flatnonzero(active)
            xy[rows, t + 1] = sim.frames[rows, :2]
            yaw[rows, t + 1] = sim.frames[rows, 3]
            q[rows, t + 1] = sim.frames[rows, 42:54]
            fell = active & (orientation_gap(sim.euler, np.zeros_like(sim.euler)) > ORI_TERMINATION)
            tipped |= fell
            end[fell] = t + 1
            alive &= ~fell
    results = []
    for i, spec in enumerate(specs):
        k = int(end[i])
        metrics = episode_metrics(spec, xy[i, : k + 1], yaw[i, : k + 1], q[i, : k + 1], bool(tipped[i]))
        trace = np.array(traces[i]) if traces[i] else np.zeros((0, models.student.cond_dim))
        results.append(
            EpisodeResult(
                spec.task_id,
                spec.seed,
                models.variant,
                judge_success(spec.task, metrics),
                "orientation" if tipped[i] else None,
                metrics,
                trace,
            )
        )
    return results


def run_closed_loop_episode(models: Models, spec: EpisodeSpec, variant: Optional[str] = None) -> EpisodeResult:
    if variant is not None and variant != models.variant:
        raise IncompatibilityError(f"models are for variant {models.variant}, not {variant}")
    return run_episodes(models, [spec])[0]


# ---------------------------------------------------------------------------
# success judging


def reference_motion(task: D.TaskSpec, scene: Scene, seed: int):
    return D.generate_motion(task, scene, seed)


def _seat(task: D.TaskSpec) -> tuple[np.ndarray, float]:
    if task.has_object:
        return D.target_position(task), float(task.target.yaw + np.pi)
    return np.zeros(2), float(np.pi)


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def episode_metrics(
    spec: EpisodeSpec,
    xy: np.ndarray,
    yaw: np.ndarray,
    q: np.ndarray,
    terminated: bool,
) -> dict:
    """Everything ``judge_success`` needs, from the logged root path and joints."""
    task = spec.task
    height = float(body.root_posture(q[-1])[0])
    m = {
        "terminated": terminated,
        "steps": int(len(xy) - 1),
        "final_x": float(xy[-1, 0]),
        "final_y": float(xy[-1, 1]),
        "final_yaw": float(yaw[-1]),
        "root_height": height,
    }
    if task.category in D.NAV:
        goal = D.target_position(task)
        d = float(np.linalg.norm(xy[-1] - goal))
        ring = D.NAV_STANDOFF if task.category == "nav_towards" else D.AROUND_RADIUS
        bearing = np.arctan2(goal[1] - xy[-1, 1], goal[0] - xy[-1, 0])
        m.update(target_distance=d, distance=abs(d - ring), heading_error=float(abs(wrap_angle(bearing - yaw[-1]))))
        if task.category == "nav_around":
            ang = np.unwrap(np.arctan2(xy[:, 1] - goal[1], xy[:, 0] - goal[0]))
            m["swept_angle"] = float(task.target.direction * (ang[-1] - ang[0]))
            m["required_arc"] = float(task.target.arc)
    elif task.category == "sit":
        seat, heading = _seat(task)
        m.update(
            distance=float(np.linalg.norm(xy[-1] - seat)),
            heading_error=float(abs(wrap_angle(yaw[-1] - heading))),
        )
    elif task.category == "locomotion":
        ref = reference_motion(task, spec.scene, spec.seed)
        n = len(xy) - 1
        w = min(n, int(round(LOCOMOTION_WINDOW / DEFAULT_DT)))
        idx = np.arange(n - w, n + 1)
        ref_yaw = np.array([ref.frame(min(k, len(ref) - 1)).root.yaw for k in idx])
        m.update(
            heading_error=float(np.mean(np.abs(wrap_angle(yaw[idx] - ref_yaw)))),
            speed=float(np.sum(np.linalg.norm(np.diff(xy[idx], axis=0), axis=1)) / max(w * DEFAULT_DT, 1e-9)),
            command_speed=float(task.target.speed),
        )
    elif task.category == "reach":
        goal = np.zeros(12)
        for j, v in D.REACH_POSES[task.target.kind].items():
            goal[j] = v
        rms = np.sqrt(np.mean((q - goal) ** 2, axis=1))
        m.update(pose_rms=float(rms[-1]), pose_hold=float(_longest_run(rms < REACH_RMS) * DEFAULT_DT))
    return m


def judge_success(task: D.TaskSpec, metrics: dict) -> bool:
    """Per-category success from the final episode metrics alone."""
    if metrics.get("terminated", False):
        return False
    cat = task.category
    if cat == "nav_towards":
        return metrics["distance"] <= NAV_TOLERANCE
    if cat == "nav_around":
        return metrics["distance"] <= NAV_TOLERANCE and metrics["swept_angle"] >= AROUND_MIN_ARC * metrics["required_arc"]
    if cat == "sit":
        return (
            metrics["distance"] <= SIT_TOLERANCE
            and metrics["root_height"] < SIT_MAX_HEIGHT
            and metrics["heading_error"] <= HEADING_TOLERANCE
        )
    if cat == "locomotion":
        cmd = metrics["command_speed"]
        return metrics["heading_error"] < HEADING_TOLERANCE and abs(metrics["speed"] - cmd) <= SPEED_TOLERANCE * cmd
    if cat == "reach":
        return metrics["pose_hold"] >= REACH_HOLD - 1e-9
    raise InvalidArgumentError(f"unknown category {cat!r}")


# ---------------------------------------------------------------------------
# suite evaluation and tables


@dataclass
class SuccessTable:
    tasks: list[SuiteTask]
    variants: list[str]
    rates: dict  # (task_id, variant) -> percent
    overall: dict  # variant -> percent
    runs: dict  # (task_id, variant) -> episode count

    @classmethod
    def from_results(cls, tasks: Sequence[SuiteTask], variants: Sequence[str], results: Sequence[EpisodeResult]) -> "SuccessTable":
        rates, runs = {}, {}
        overall = {}
        for v in variants:
            flags = [r.success for r in results if r.variant == v]
            overall[v] = 100.0 * float(np.mean(flags)) if flags else 0.0
            for t in tasks:
                f = [r.success for r in results if r.variant == v and r.task_id == t.id]
                rates[(t.id, v)] = 100.0 * float(np.mean(f)) if f else 0.0
                runs[(t.id, v)] = len(f)
        return cls(list(tasks), list(variants), rates, overall, runs)

    def rows(self) -> list[list[str]]:
        out = [["task", "environment", *self.variants]]
        for t in self.tasks:
            out.append([t.label, t.environment, *(f"{self.rates[(t.id, v)]:.1f}" for v in self.variants)])
        out.append(["All", "-", *(f"{self.overall[v]:.1f}" for v in self.variants)])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "variants": self.variants,
            "tasks": [asdict(t) | {"id": t.id} for t in self.tasks],
            "rates": {f"{k[0]}|{k[1]}": v for k, v in sorted(self.rates.items())},
            "runs": {f"{k[0]}|{k[1]}": v for k, v in sorted(self.runs.items())},
            "overall": self.overall,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def report(self) -> str:
        rows = self.rows()
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = []
        for k, r in enumerate(rows):
            cells = [r[0].ljust(widths[0]), r[1].ljust(widths[1])] + [c.rjust(w) for c, w in zip(r[2:], widths[2:])]
            lines.append("  ".join(cells))
            if k == 0 or k == len(rows) - 2:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, stem) -> list[Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = [stem.with_suffix(".csv"), stem.with_suffix(".json"), stem.with_suffix(".txt")]
        for p, text in zip(paths, (self.to_csv(), self.to_json(), self.report())):
            p.write_text(text)
        return paths


def evaluate_suite(
    models_per_variant: dict[str, Models],
    suite: SuiteConfig,
    variants: Optional[Sequence[str]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[SuccessTable, list[EpisodeResult]]:
    """All runs of every (task, variant) pair; every variant sees the same task instances."""
    variants = list(variants or models_per_variant)
    missing = [v for v in variants if v not in models_per_variant]
    if missing:
        raise ConfigError(f"no trained models for variants {missing}")
    episodes = suite_episodes(suite)
    results: list[EpisodeResult] = []
    for v in variants:
        models = models_per_variant[v]
        if models.variant != v:
            models = replace(models, variant=v)
        for t in suite.tasks:
            batch = [e for e in episodes if e.task_id == t.id]
            res = run_episodes(models, batch)
            results.extend(res)
            if log is not None:
                log(f"{v:5s} {t.id:22s} {100.0 * np.mean([r.success for r in res]):5.1f}%")
    return SuccessTable.from_results(suite.tasks, variants, results), results


def write_results(path, results: Sequence[EpisodeResult]) -> None:
    Path(path).write_text(json.dumps([r.summary() for r in results], indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# latent traces


@dataclass
class LatentTrace:
    spec: EpisodeSpec
    conditioning: np.ndarray  # (ticks, dim) exactly as fed to the student
    variant: str
    final: dict

    def save(self, path) -> None:
        header = {
            "task": self.spec.task.to_dict(),
            "scene": self.spec.scene.to_dict(),
            "instruction": self.spec.instruction,
            "task_id": self.spec.task_id,
            "sim_seed": self.spec.seed,
            "max_steps": self.spec.max_steps,
            "blind": self.spec.blind,
            "variant": self.variant,
            "final": self.final,
        }
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), conditioning=self.conditioning)

    @classmethod
    def load(cls, path) -> "LatentTrace":
        with np.load(path, allow_pickle=False) as z:
            h = json.loads(str(z["header"]))
            cond = z["conditioning"]
        spec = EpisodeSpec(
            h["task_id"],
            D.TaskSpec.from_dict(h["task"]),
            Scene.from_dict(h["scene"]),
            h["instruction"],
            h["sim_seed"],
            h["max_steps"],
            h["blind"],
        )
        return cls(spec, cond, h["variant"], h["final"])


def trace_of(spec: EpisodeSpec, result: EpisodeResult) -> LatentTrace:
    return LatentTrace(spec, result.latent_trace, result.variant, result.metrics)


def replay_trace(models: Models, trace: LatentTrace) -> EpisodeResult:
    """Open-loop re-execution of recorded conditioning under the recorded sim seed."""
    if trace.conditioning.ndim != 2 or trace.conditioning.shape[1] != models.student.cond_dim:
        raise IncompatibilityError("trace conditioning width does not match the student")
    return run_episodes(models, [trace.spec], conditioning=[trace.conditioning])[0]


# ---------------------------------------------------------------------------
# instructions typed at the console


_LOCO_WORDS = {"walk", "run", "jog", "sprint", "stroll", "turn", "curve", "forward", "straight"}
_REACH_WORDS = {"raise", "lift", "reach", "stretch", "hand", "hands", "arm", "arms"}


def task_from_instruction(text: str, seed: int, split: str = "eval") -> tuple[D.TaskSpec, bool]:
    """Map a free-form instruction to a task spec; returns (task, blind)."""
    words = re.findall(r"[a-z]+", text.lower())
    if not words:
        raise InvalidArgumentError("empty instruction")
    ws = set(words)
    color = next((w for w in words if w in COLORS), None)
    cls = next((w for w in words if w in CLASSES), None)
    has_obj = color is not None or cls is not None
    rng = np.random.default_rng(seed)
    side = "left" if "left" in ws else "right" if "right" in ws else None

    def with_object(category: str, **kw) -> D.TaskSpec:
        t = D.sample_task(category, rng, split, **kw)
        tgt = t.target
        c = color or tgt.color
        k = cls or tgt.cls
        if category == "sit" and k not in SITTABLE:
            raise InvalidArgumentError(f"cannot sit on a {k}")
        return replace(t, target=replace(tgt, color=c, cls=k))

    if ws & {"sit", "seat"}:
        if has_obj:
            return with_object("sit"), False
        kind = "sit_turn_right" if side == "right" else "sit_turn_left"
        return D.TaskSpec("sit", D.MotionTarget(kind, duration=0.0)), True
    if ws & _REACH_WORDS and not has_obj:
        kind = "raise_both" if "both" in ws else f"raise_{side}" if side else "reach_forward"
        if ws & {"reach", "stretch"} and "both" not in ws and not side:
            kind = "reach_forward"
        base = D.sample_task("reach", rng, split, blind=True)
        return replace(base, target=replace(base.target, kind=kind)), True
    if has_obj:
        if ws & {"around", "circle"}:
            t = with_object("nav_around")
            if "clockwise" in ws:
                t = replace(t, target=replace(t.target, direction=-1))
            elif "counterclockwise" in ws:
                t = replace(t, target=replace(t.target, direction=1))
            return t, False
        spawn = "rear" if "behind" in ws else "front"
        return with_object("nav_towards", spawn_relation=spawn, clutter_level="objective"), False
    if ws & _LOCO_WORDS:
        if ws & {"run", "jog", "sprint", "fast"}:
            kind = "run_forward"
        elif "turn" in ws or "curve" in ws:
            kind = f"turn_{side or 'left'}"
        else:
            kind = "walk_forward"
        base = D.sample_task("locomotion", rng, split, blind=True)
        speed = rng.uniform(1.6, 1.8) if kind == "run_forward" else rng.uniform(0.7, 0.9)
        rate = {"turn_left": 1.0, "turn_right": -1.0}.get(kind, 0.0) * rng.uniform(0.6, 0.8)
        return replace(base, target=replace(base.target, kind=kind, speed=float(speed), yaw_rate=float(rate))), True
    raise InvalidArgumentError(f"cannot interpret instruction {text!r}")


def swap_target(spec: EpisodeSpec) -> EpisodeSpec:
    """Exchange the target's appearance with the first distractor's (geometry unchanged)."""
    objs = list(spec.scene.objects)
    if len(objs) < 2:
        return spec
    a, b = objs[0], objs[1]
    objs[0] = replace(a, cls=b.cls, color=b.color)
    objs[1] = replace(b, cls=a.cls, color=a.color)
    task = spec.task
    if task.category != "sit" or b.cls in SITTABLE:
        task = replace(task, target=replace(task.target, cls=b.cls, color=b.color))
    return replace(spec, task=task, scene=replace(spec.scene, objects=tuple(objs)))


# ---------------------------------------------------------------------------
# console


CONSOLE_HELP = """commands:
  <instruction>      run the closed loop on a typed instruction
  reset              new scene for the next instruction
  reseed <int>       set the scene seed (also resets)
  swap               exchange target and first distractor appearance
  dump <path>        save the last latent trace
  replay last        re-run the last latent trace open loop
  replay <path>      re-run a saved latent trace open loop
  help               this message
  quit               end the session
"""


class Console:
    """Single-threaded read-eval loop over one set of models."""

    def __init__(
        self,
        models: Models,
        stdin: TextIO,
        stdout: TextIO,
        seed: int = 0,
        unseen: bool = True,
        tick_every: int = 10,
        prompt: str = "> ",
    ):
        self.models = models
        self.stdin, self.stdout = stdin, stdout
        self.seed = int(seed)
        self.scene_index = 0
        self.unseen = unseen
        self.swapped = False
        self.tick_every = max(int(tick_every), 1)
        self.prompt = prompt
        self.results: list[EpisodeResult] = []
        self.last: Optional[LatentTrace] = None

    def _print(self, *parts) -> None:
        print(*parts, file=self.stdout)

    def episode_for(self, text: str) -> EpisodeSpec:
        seed = derive_seed(self.seed, "console", self.scene_index)
        task, blind = task_from_instruction(text, seed, "eval" if self.unseen else "train")
        scene = D.build_scene(task, seed, "eval" if self.unseen else "train")
        steps = episode_steps(task)
        spec = EpisodeSpec("console", task, scene, text, seed, steps, blind)
        return swap_target(spec) if self.swapped else spec

    def run_instruction(self, text: str) -> EpisodeResult:
        spec = self.episode_for(text)
        shown = [0]

        def on_tick(step, rows, frames):
            if shown[0] % self.tick_every == 0:
                f = frames[0]
                self._print(f"  t={step * DEFAULT_DT:5.2f}s  x={f[0]:+.2f} y={f[1]:+.2f} yaw={f[3]:+.2f} z={f[2]:.2f}")
            shown[0] += 1

        res = run_episodes(self.models, [spec], on_tick=on_tick)[0]
        self.results.append(res)
        self.last = trace_of(spec, res)
        self._print(self._verdict(spec, res))
        return res

    def _verdict(self, spec: EpisodeSpec, res: EpisodeResult) -> str:
        m = res.metrics
        status = "SUCCESS" if res.success else "FAIL"
        why = f" ({res.termination_reason})" if res.termination_reason else ""
        return (
            f"[{spec.task.category}] {status}{why}: final x={m['final_x']:+.3f} y={m['final_y']:+.3f} "
            f"yaw={m['final_yaw']:+.3f} height={m['root_height']:.3f}"
        )

    def replay(self, trace: LatentTrace) -> EpisodeResult:
        res = replay_trace(self.models, trace)
        same = all(res.metrics.get(k) == trace.final.get(k) for k in ("final_x", "final_y", "final_yaw"))
        self._print(self._verdict(trace.spec, res))
        self._print("replay matches recorded run" if same else "replay differs from recorded run")
        return res

    def handle(self, line: str) -> bool:
        """Process one line; returns False when the session should end."""
        line = line.strip()
        if not line:
            return True
        cmd, _, arg = line.partition(" ")
        arg = arg.strip()
        try:
            if cmd == "quit" or cmd == "exit":
                return False
            if cmd == "help":
                self.stdout.write(CONSOLE_HELP)
            elif cmd == "reset":
                self.scene_index += 1
                self.swapped = False
                self._print(f"scene reset (seed {self.seed}, scene {self.scene_index})")
            elif cmd == "reseed":
                if not re.fullmatch(r"-?\d+", arg):
                    raise InvalidArgumentError("usage: reseed <int>")
                self.seed, self.scene_index, self.swapped = int(arg), 0, False
                self._print(f"seed set to {self.seed}")
            elif cmd == "swap":
                self.swapped = not self.swapped
                self._print("target and first distractor swapped" if self.swapped else "swap undone")
            elif cmd == "dump":
                if not arg:
                    raise InvalidArgumentError("usage: dump <path>")
                if self.last is None:
                    raise InvalidArgumentError("no episode to dump yet")
                self.last.save(arg)
                self._print(f"latent trace written to {arg}")
            elif cmd == "replay":
                if not arg:
                    raise InvalidArgumentError("usage: replay last | replay <path>")
                if arg == "last":
                    if self.last is None:
                        raise InvalidArgumentError("no episode to replay yet")
                    self.replay(self.last)
                else:
                    self.replay(LatentTrace.load(arg))
            else:
                self.run_instruction(line)
        except (InvalidArgumentError, OSError, ValueError, KeyError) as e:
            self._print(f"error: {e}")
            self._print("type 'help' for usage")
        return True

    def loop(self) -> list[EpisodeResult]:
        while True:
            if self.prompt:
                print(self.prompt, end="", file=self.stdout, flush=True)
            line = self.stdin.readline()
            if not line or not self.handle(line):
                break
        ok = sum(r.success for r in self.results)
        self._print(f"session ended: {len(self.results)} episodes, {ok} successful")
        return self.results


def interactive_console(models: Models, stdin: TextIO, stdout: TextIO, seed: int = 0) -> list[EpisodeResult]:
    return Console(models, stdin, stdout, seed).loop()
