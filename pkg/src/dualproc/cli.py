"""Command-line entry point: one subcommand per pipeline stage plus eval, console and replay.

All subcommands share ``--config`` (YAML), ``--seed`` (master seed) and
``--workdir`` (artifact directory with fixed file names).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from dualproc import datagen as D
from dualproc import harness as H
from dualproc import pipeline as P
from dualproc import system2 as S2
from dualproc import teacher as T
from dualproc.errors import (
    ConfigError,
    GenerationError,
    IllegalStateError,
    IncompatibilityError,
    InvalidArgumentError,
    OutOfRangeError,
)
from dualproc.student import conditioning_from_cache, conditioning_from_tokens, distill_dagger, save_student

HANDLED = (ConfigError, GenerationError, IllegalStateError, IncompatibilityError, InvalidArgumentError, OutOfRangeError, OSError)


def _settings(args) -> P.Settings:
    return P.load_settings(args.config) if args.config else P.Settings()


def _variant(v: str) -> str:
    if v not in H.VARIANTS:
        raise argparse.ArgumentTypeError(f"unknown variant {v!r} (choose from {', '.join(H.VARIANTS)})")
    return v


def _variants(text: str) -> list[str]:
    return [_variant(v.strip()) for v in text.split(",") if v.strip()]


def _load_data(wd: P.Workdir, settings: P.Settings):
    wd.require(wd.data / "manifest.json", "dataset (run datagen first)")
    ds = D.load_dataset(wd.data, load_images=True)
    perc = wd.load_perception()
    return ds, perc, S2.dataset_tokens(perc, ds)


def cmd_datagen(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    ds = P.build_dataset(settings, args.seed)
    if args.images:
        for r in ds.records:
            if not r.blind:
                r.images = r.render_images()
    D.save_dataset(ds, wd.data, images=args.images)
    P.make_perception(settings).save(wd.perception)
    print(f"{len(ds)} records written to {wd.data} (manifest {wd.data / 'manifest.json'})")
    return 0


def cmd_train_s2(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    pcfg = H.make_ablation_config(args.variant, settings.system2, settings.dagger)
    if not pcfg.needs_system2:
        raise ConfigError(f"variant {args.variant} does not use a System-2 model")
    ds, perc, toks = _load_data(wd, settings)
    model, met = S2.train_system2(ds, pcfg.system2, P.stage_seed(args.seed, "system2"), perc, toks, log=_log_row)
    S2.save_model(wd.system2(args.variant), model)
    print(f"model written to {wd.system2(args.variant)}")
    return 0


def cmd_cache(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    ds, perc, toks = _load_data(wd, settings)
    model = S2.load_model(wd.require(wd.system2(args.variant), "System-2 model"), perc)
    S2.save_cache(wd.cache(args.variant), S2.cache_latents(model, ds, perc, toks))
    print(f"latents written to {wd.cache(args.variant)}")
    return 0


def cmd_train_teacher(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    wd.require(wd.data / "manifest.json", "dataset (run datagen first)")
    ds = D.load_dataset(wd.data)
    groups = list(T.TEACHER_GROUPS) if args.group == "all" else [args.group]
    for g in groups:
        refs = P.teacher_references(ds, g)
        if not refs:
            raise ConfigError(f"dataset has no references for teacher group {g!r}")
        cfg = T.PPOConfig.from_dict({**settings.teacher, "iterations": int(settings.teacher_iterations[g])})
        policy, met = T.train_teacher(g, refs, cfg, P.stage_seed(args.seed, f"teacher/{g}"), _log_row)
        T.save_teacher(wd.teacher(g), policy, cfg)
        print(f"{g}: per-step reward {met.step_reward_curve[0]:.3f} -> {met.step_reward_curve[-1]:.3f}; written to {wd.teacher(g)}")
    return 0


def cmd_distill(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    pcfg = H.make_ablation_config(args.variant, settings.system2, settings.dagger)
    ds, perc, toks = _load_data(wd, settings)
    if pcfg.needs_system2:
        cache = S2.load_cache(wd.require(wd.cache(args.variant), "latent cache (run cache-latents first)"))
        model = S2.load_model(wd.require(wd.system2(args.variant), "System-2 model"), perc)
        if cache.model_checksum != model.checksum():
            raise IncompatibilityError("latent cache was produced by a different System-2 model")
        cond = conditioning_from_cache(cache)
    else:
        cond = conditioning_from_tokens(toks, perc.checksum)
    teachers = wd.load_teachers()
    student, met = distill_dagger(teachers, cond, ds, pcfg.dagger, P.stage_seed(args.seed, "dagger"), _log_row)
    save_student(wd.student(args.variant), student, {"variant": args.variant})
    print(f"student written to {wd.student(args.variant)} (final loss {met.loss[-1]:.4f})")
    return 0


def cmd_eval(args, settings: P.Settings) -> int:
    wd = P.Workdir(args.workdir)
    suite_dict = dict(settings.suite)
    if args.suite != "default":
        suite_dict["tasks"] = [t.strip() for t in args.suite.split(",")]
    if args.runs is not None:
        suite_dict["runs_per_task"] = args.runs
    suite = H.SuiteConfig.from_dict(suite_dict, P.stage_seed(args.seed, "suite"))
    variants = args.variants or settings.variants
    models = {v: wd.load_models(v) for v in variants}
    table, results = H.evaluate_suite(models, suite, variants, log=print if args.verbose else None)
    out = Path(args.out) if args.out else wd.path("success_table")
    paths = P.save_table(table, results, out)
    sys.stdout.write(table.report())
    print("written: " + ", ".join(str(p) for p in paths))
    return 0


def cmd_console(args, settings: P.Settings) -> int:
    models = P.Workdir(args.workdir).load_models(args.variant)
    H.Console(models, sys.stdin, sys.stdout, seed=args.seed).loop()
    return 0


def cmd_replay(args, settings: P.Settings) -> int:
    trace = H.LatentTrace.load(args.trace)
    variant = args.variant or trace.variant
    res = H.replay_trace(P.Workdir(args.workdir).load_models(variant), trace)
    m = res.metrics
    same = all(m[k] == trace.final.get(k) for k in ("final_x", "final_y", "final_yaw"))
    print(f"final x={m['final_x']:+.6f} y={m['final_y']:+.6f} yaw={m['final_yaw']:+.6f} success={res.success}")
    print("replay matches recorded run" if same else "replay differs from recorded run")
    return 0


def _log_row(row: dict) -> None:
    print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--workdir", default="work", help="artifact directory")

    parser = argparse.ArgumentParser(prog="dualproc", description="Desk-scale dual-process humanoid pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("datagen", parents=[common], help="generate the demonstration dataset")
    p.add_argument("--images", action="store_true", help="also store rendered images")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train-s2", parents=[common], help="train a System-2 model")
    p.add_argument("--variant", type=_variant, default="FULL")
    p.set_defaults(func=cmd_train_s2)

    p = sub.add_parser("cache-latents", parents=[common], help="cache prior latents for every record")
    p.add_argument("--variant", type=_variant, default="FULL")
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("train-teacher", parents=[common], help="train tracking teachers with PPO")
    p.add_argument("--group", choices=[*T.TEACHER_GROUPS, "all"], default="all")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", parents=[common], help="distill a student with DAgger")
    p.add_argument("--variant", type=_variant, default="FULL")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="run the benchmark suite")
    p.add_argument("--suite", default="default", help="'default' or comma-separated task ids")
    p.add_argument("--variants", type=_variants, default=None, help="comma-separated variants")
    p.add_argument("--runs", type=int, default=None, help="runs per task")
    p.add_argument("--out", default=None, help="output path stem for the table files")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("console", parents=[common], help="interactive instruction console")
    p.add_argument("--variant", type=_variant, default="FULL")
    p.set_defaults(func=cmd_console)

    p = sub.add_parser("replay", parents=[common], help="replay a dumped latent trace open loop")
    p.add_argument("trace")
    p.add_argument("--variant", type=_variant, default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, _settings(args))
    except HANDLED as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
