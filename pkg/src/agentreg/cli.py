"""Command-line entry point.

Subcommands: gen-data, train, register, benchmark, report. Global flags:
--config (JSON document), --seed, --workers, --out. Exit codes: 0 success,
2 configuration error, 3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import bench
from . import registration as reg
from . import se3
from . import serialization as ser
from . import training as tr
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .phantom import PhantomParams, generate_phantom
from .projection import render_drr
from .registration import NetworkPolicy, RegistrationRunConfig
from .se3 import RigidTransform

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid config JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _build(cls, overrides: dict, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = {**overrides, **extra}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def _phantom_params(doc: dict, seed: int | None) -> PhantomParams:
    overrides = _section(doc, "phantom")
    if seed is not None:
        overrides = {**overrides, "seed": seed}
    return _build(PhantomParams, overrides)


def _geometries(doc: dict):
    geo = _section(doc, "geometry")
    return bench.ExperimentConfig(**{
        k: v for k, v in geo.items()
        if k in {"views", "separation_deg", "image_dims", "pixel_spacing",
                 "source_to_detector", "source_to_center"}
    }).geometries()


def cmd_gen_data(args) -> int:
    doc = _load_config(args.config)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    n = int(_section(doc, "gen_data").get("n_volumes", 4))
    base_seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    geometries = _geometries(doc)
    for k, g in enumerate(geometries):
        ser.save_geometry(out / f"geometry_view{k}.json", g)
    for i in range(n):
        params = _phantom_params(doc, base_seed * 1000 + i)
        volume, landmarks = generate_phantom(params)
        ser.save_volume(out / f"phantom_{i:03d}", volume)
        ser.save_landmarks(out / f"phantom_{i:03d}_landmarks.json", landmarks)
        preview = render_drr(volume, RigidTransform.identity(), geometries[0])
        ser.save_image_pgm(out / f"phantom_{i:03d}_view0", preview)
    print(f"wrote {n} phantom volumes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    out = Path(args.out or "train_out")
    out.mkdir(parents=True, exist_ok=True)
    overrides = _section(doc, "training")
    if args.seed is not None:
        overrides = {**overrides, "seed": args.seed}
    if args.mode is not None:
        overrides = {**overrides, "mode": args.mode}
    cfg = _build(tr.TrainConfig, overrides)

    gen = _section(doc, "gen_data")
    n_train = int(gen.get("n_train_volumes", 3))
    base_seed = int(doc.get("seed", 0))
    volumes = []
    for i in range(n_train):
        params = _phantom_params(doc, base_seed * 1000 + i)
        volumes.append(generate_phantom(params)[0])
    held = generate_phantom(_phantom_params(doc, base_seed * 1000 + 999))[0]
    geometries = _geometries(doc)
    eval_states = tr.make_eval_states(
        held, geometries, cfg, seed=cfg.seed + 7919,
        n_states=int(gen.get("eval_states", 16)),
        anchors_per_state=int(gen.get("eval_anchors", 96)),
    )

    logger = tr.TrainLogger(path=out / "training_log.ndjson")
    train = tr.train_fcn if cfg.mode == "fcn" else tr.train_cnn
    params, log = train(volumes, geometries, cfg, eval_states=eval_states, logger=logger)

    confs, correct = tr.agent_confidence_stats(params, eval_states)
    calibrated = tr.calibrate_confidence_threshold(confs, correct)
    final_rate = log[-1]["correct_action_rate"] if log else None
    save_checkpoint(
        params,
        out / "checkpoint.bin",
        manifest_extra={
            "training_config": asdict(cfg),
            "calibrated_threshold": calibrated,
            "default_threshold": 0.67,
            "final_correct_action_rate": final_rate,
        },
    )
    print(f"checkpoint written to {out / 'checkpoint.bin'} "
          f"(final correct-action rate: {final_rate})")
    return EXIT_OK


def cmd_register(args) -> int:
    doc = _load_config(args.config)
    out = Path(args.out or "register_out")
    out.mkdir(parents=True, exist_ok=True)
    ckpt = args.checkpoint or doc.get("checkpoint")
    if ckpt is None or not Path(ckpt).exists():
        print("error: checkpoint required for registration", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    params, manifest = load_checkpoint(ckpt)

    volume = ser.load_volume(args.volume)
    geometries = [ser.load_geometry(p) for p in args.geometry]
    fixed = [ser.load_image_raw(p) for p in args.fixed]
    if len(fixed) != len(geometries):
        raise ConfigError("need one fixed image per geometry")
    views = [bl.View(geometry=g, fixed=f) for g, f in zip(geometries, fixed)]
    t_init = (
        RigidTransform.from_json(json.loads(Path(args.init).read_text()))
        if args.init
        else RigidTransform.identity()
    )
    overrides = _section(doc, "registration")
    cfg = _build(RegistrationRunConfig, overrides,
                 mode=args.mode, views=len(views))
    policy = NetworkPolicy(params, [v.fixed for v in views], cfg.step_mm)
    trajectory = reg.register(volume, views, t_init, policy, cfg)
    pose = reg.final_pose(trajectory)
    if cfg.mode == "agt_m_opt":
        pose = bl.refine_local(volume, views, pose, step_mm=cfg.step_mm)
        trajectory.append({**trajectory[-1], "pose": pose.to_json(), "step": cfg.steps + 1})
    ser.save_trajectory(out / "trajectory.json", trajectory)
    print(f"final pose written to {out / 'trajectory.json'}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    doc = _load_config(args.config)
    out = Path(args.out or "bench_out")
    overrides = _section(doc, "benchmark")
    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.workers is not None:
        extra["workers"] = args.workers
    if args.checkpoint is not None:
        extra["checkpoint"] = args.checkpoint
    elif "checkpoint" not in overrides and doc.get("checkpoint"):
        extra["checkpoint"] = doc["checkpoint"]
    cfg = _build(bench.ExperimentConfig, overrides, **extra)

    wants_agents = bool(bench.AGENT_METHODS & set(cfg.methods))
    has_ckpt = cfg.checkpoint is not None and Path(cfg.checkpoint).exists()
    records, notices, extras = bench.run_benchmark(cfg)
    for notice in notices:
        print(f"notice: {notice}", file=sys.stderr)
    bench.emit_reports(records, out, extras)
    print((out / "table.txt").read_text())
    if wants_agents and not has_ckpt and not any(
        r.method in bench.AGENT_METHODS for r in records
    ):
        return EXIT_MISSING_CHECKPOINT
    return EXIT_OK


def cmd_report(args) -> int:
    results = Path(args.results)
    if not results.exists():
        raise ConfigError(f"results file not found: {results}")
    rows = bench.load_results_csv(results)
    records = [
        bench.ResultRecord(
            dataset_id=r["dataset_id"],
            trial_id=r["trial_id"],
            method=r["method"],
            tre_mm=r["tre_mm"],
            steps=r["steps"],
            wall_clock_s=r["wall_clock_s"],
            pose=r["pose"],
            success=r["gfr_flag"] == 0,
        )
        for r in rows
    ]
    out = Path(args.out or results.parent)
    summary = bench.emit_reports(records, out)
    print(bench.summary_table(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentreg",
        description="Multi-agent MDP 2D/3D registration experiments",
    )
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--seed", type=int, help="root random seed")
    parser.add_argument("--workers", type=int, help="worker count for trial fan-out")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate phantom volumes and geometry files")

    p_train = sub.add_parser("train", help="train the reward network")
    p_train.add_argument("--mode", choices=["fcn", "cnn"], default=None)

    p_reg = sub.add_parser("register", help="register one case")
    p_reg.add_argument("--volume", required=True, help="volume base path (.raw/.json)")
    p_reg.add_argument("--fixed", nargs="+", required=True, help="fixed image base paths")
    p_reg.add_argument("--geometry", nargs="+", required=True, help="geometry JSON paths")
    p_reg.add_argument("--checkpoint", help="trained checkpoint")
    p_reg.add_argument("--init", help="JSON file with a 16-float initial pose")
    p_reg.add_argument("--mode", choices=["agt_s", "agt_m", "agt_m_opt"], default="agt_m")

    p_bench = sub.add_parser("benchmark", help="run the full benchmark")
    p_bench.add_argument("--checkpoint", help="trained checkpoint")

    p_rep = sub.add_parser("report", help="recompute reports from results.csv")
    p_rep.add_argument("--results", required=True, help="path to results.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "register": cmd_register,
        "benchmark": cmd_benchmark,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
