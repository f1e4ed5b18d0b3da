"""End-to-end training pipeline: dataset -> System-2 variants -> latent caches
-> teachers -> distilled students -> benchmark suite.

Every stage draws its seed from one master seed, so a fixed master seed
reproduces every artifact and the final SuccessTable on one machine.
Artifacts live in a work directory with fixed file names (see ``Workdir``).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from dualproc import datagen as D
from dualproc import harness as H
from dualproc import system2 as S2
from dualproc import teacher as T
from dualproc.errors import ConfigError
from dualproc.perception import Perception
from dualproc.student import (
    Conditioning,
    conditioning_from_cache,
    conditioning_from_tokens,
    distill_dagger,
    load_student,
)

DEFAULT_TEACHER_ITERATIONS = {"locomotion": 400, "sit": 200, "reach": 150}


@dataclass
class Settings:
    mixture: dict = field(default_factory=lambda: dict(D.DEFAULT_MIXTURE))
    perception_seed: int = 0
    system2: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=lambda: {"n_envs": 64})
    teacher_iterations: dict = field(default_factory=lambda: dict(DEFAULT_TEACHER_ITERATIONS))
    dagger: dict = field(default_factory=dict)
    suite: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: list(H.VARIANTS))

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Settings":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        s = cls(**{k: v for k, v in d.items() if v is not None})
        bad = [v for v in s.variants if v not in H.VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        missing = set(T.TEACHER_GROUPS) - set(s.teacher_iterations)
        if missing:
            raise ConfigError(f"teacher_iterations lacks groups {sorted(missing)}")
        # validate nested sections early
        S2.S2Config.from_dict(s.system2)
        T.PPOConfig.from_dict(s.teacher)
        H.make_ablation_config("FULL", s.system2, s.dagger)
        H.SuiteConfig.from_dict(s.suite)
        return s

    def to_dict(self) -> dict:
        return asdict(self)


def load_settings(path) -> Settings:
    """Read a YAML config file; a missing or malformed file raises ConfigError naming the path."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config file {p}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a mapping")
    return Settings.from_dict(doc)


def stage_seed(master: int, stage: str) -> int:
    return H.derive_seed(master, "stage", stage)


# ---------------------------------------------------------------------------
# stages


def build_dataset(settings: Settings, seed: int) -> D.Dataset:
    return D.assemble_mixture(settings.mixture, stage_seed(seed, "datagen"))


def make_perception(settings: Settings) -> Perception:
    d_model = S2.S2Config.from_dict(settings.system2).d_model
    return Perception(settings.perception_seed, d_model)


def teacher_references(dataset: D.Dataset, group: str) -> list:
    """One reference per distinct motion in the group (variants share motions)."""
    seen, out = set(), []
    for r in dataset.records:
        if T.teacher_group(r.task.category) == group and (r.motion_seed, r.mirrored) not in seen:
            seen.add((r.motion_seed, r.mirrored))
            out.append(r.traj)
    return out


def train_teachers(settings: Settings, dataset: D.Dataset, seed: int, log=None) -> tuple[dict, dict]:
    """PPO teachers per group present in the dataset; returns (policies, metrics) keyed by group."""
    teachers, metrics = {}, {}
    for g in T.TEACHER_GROUPS:
        refs = teacher_references(dataset, g)
        if not refs:
            continue
        cfg = T.PPOConfig.from_dict({**settings.teacher, "iterations": int(settings.teacher_iterations[g])})
        teachers[g], metrics[g] = T.train_teacher(g, refs, cfg, stage_seed(seed, f"teacher/{g}"), log)
    return teachers, metrics


def conditioning_for(
    pcfg: H.PipelineConfig,
    dataset: D.Dataset,
    tokens: list[np.ndarray],
    perception: Perception,
    model: Optional[S2.System2Model],
) -> Conditioning:
    if pcfg.needs_system2:
        return conditioning_from_cache(S2.cache_latents(model, dataset, perception, tokens))
    return conditioning_from_tokens(tokens, perception.checksum)


@dataclass
class Artifacts:
    dataset: D.Dataset
    tokens: list
    perception: Perception
    system2: dict = field(default_factory=dict)  # variant -> model (None for NVL)
    s2_metrics: dict = field(default_factory=dict)
    conditioning: dict = field(default_factory=dict)
    teachers: dict = field(default_factory=dict)
    teacher_metrics: dict = field(default_factory=dict)
    students: dict = field(default_factory=dict)
    dagger_metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def models(self, variant: str) -> H.Models:
        return H.Models(self.perception, self.students[variant], self.system2.get(variant), variant)


def train_variants(
    settings: Settings,
    seed: int,
    variants: Optional[Sequence[str]] = None,
    log: Optional[Callable[[str], None]] = None,
    artifacts: Optional[Artifacts] = None,
) -> Artifacts:
    """Train every requested variant; System-2 models are shared between variants with equal configs."""
    say = log or (lambda s: None)
    variants = list(variants or settings.variants)
    t0 = time.perf_counter()
    if artifacts is None:
        ds = build_dataset(settings, seed)
        perc = make_perception(settings)
        toks = S2.dataset_tokens(perc, ds)
        artifacts = Artifacts(ds, toks, perc)
        artifacts.timings["datagen"] = time.perf_counter() - t0
        say(f"dataset: {len(ds)} records ({artifacts.timings['datagen']:.0f}s)")
    ds, toks, perc = artifacts.dataset, artifacts.tokens, artifacts.perception
    if not artifacts.teachers:
        t = time.perf_counter()
        artifacts.teachers, artifacts.teacher_metrics = train_teachers(settings, ds, seed)
        artifacts.timings["teachers"] = time.perf_counter() - t
        say(f"teachers: {sorted(artifacts.teachers)} ({artifacts.timings['teachers']:.0f}s)")
    by_key: dict[str, tuple] = {}
    for v, m in artifacts.system2.items():
        if m is not None:
            by_key[H.make_ablation_config(v, settings.system2, settings.dagger).system2_key()] = (m, artifacts.conditioning[v])
    for v in variants:
        if v in artifacts.students:
            continue
        pcfg = H.make_ablation_config(v, settings.system2, settings.dagger)
        model = None
        t = time.perf_counter()
        if pcfg.needs_system2:
            key = pcfg.system2_key()
            if key not in by_key:
                model, met = S2.train_system2(ds, pcfg.system2, stage_seed(seed, "system2"), perc, toks)
                artifacts.s2_metrics[v] = met
                artifacts.timings[f"system2/{v}"] = time.perf_counter() - t
                by_key[key] = (model, conditioning_for(pcfg, ds, toks, perc, model))
                say(f"{v}: system-2 trained ({time.perf_counter() - t:.0f}s), val recon {met.last().get('val_recon', float('nan')):.3f}")
            model, cond = by_key[key]
        else:
            cond = conditioning_for(pcfg, ds, toks, perc, None)
        artifacts.system2[v] = model
        artifacts.conditioning[v] = cond
        t = time.perf_counter()
        student, dm = distill_dagger(artifacts.teachers, cond, ds, pcfg.dagger, stage_seed(seed, "dagger"))
        artifacts.students[v] = student
        artifacts.dagger_metrics[v] = dm
        artifacts.timings[f"distill/{v}"] = time.perf_counter() - t
        say(f"{v}: student distilled ({artifacts.timings[f'distill/{v}']:.0f}s), final loss {dm.loss[-1]:.4f}")
    return artifacts


def run_pipeline(
    settings: Settings,
    seed: int,
    variants: Optional[Sequence[str]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> tuple[H.SuccessTable, list[H.EpisodeResult], Artifacts]:
    variants = list(variants or settings.variants)
    art = train_variants(settings, seed, variants, log)
    suite = H.SuiteConfig.from_dict(settings.suite, stage_seed(seed, "suite"))
    t = time.perf_counter()
    table, results = H.evaluate_suite({v: art.models(v) for v in variants}, suite, variants, log)
    art.timings["suite"] = time.perf_counter() - t
    return table, results, art


# ---------------------------------------------------------------------------
# work directory layout


class Workdir:
    """Fixed artifact names under one directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def perception(self) -> Path:
        return self.root / "perception.json"

    def system2(self, variant: str) -> Path:
        return self.root / f"system2_{variant}.npz"

    def cache(self, variant: str) -> Path:
        return self.root / f"latents_{variant}.npz"

    def teacher(self, group: str) -> Path:
        return self.root / f"teacher_{group}.npz"

    def student(self, variant: str) -> Path:
        return self.root / f"student_{variant}.npz"

    def require(self, p: Path, what: str) -> Path:
        if not p.exists():
            raise ConfigError(f"missing {what}: {p}")
        return p

    def load_perception(self) -> Perception:
        return Perception.load(self.require(self.perception, "perception encoders"))

    def load_models(self, variant: str) -> H.Models:
        perc = self.load_perception()
        student, header = load_student(self.require(self.student(variant), f"{variant} student"))
        model = None
        if student.cond_kind == "latent":
            model = S2.load_model(self.require(self.system2(variant), f"{variant} System-2 model"), perc)
        return H.Models(perc, student, model, variant)

    def load_teachers(self) -> dict[str, T.TeacherPolicy]:
        out = {}
        for g in T.TEACHER_GROUPS:
            p = self.teacher(g)
            if p.exists():
                out[g] = T.load_teacher(p)
        return out


def save_table(table: H.SuccessTable, results: Sequence[H.EpisodeResult], stem) -> list[Path]:
    paths = table.write(stem)
    raw = Path(stem).with_name(Path(stem).name + "_episodes.json")
    H.write_results(raw, results)
    return paths + [raw]
