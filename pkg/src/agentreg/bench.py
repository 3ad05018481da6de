"""Benchmark orchestration: dataset construction, registration trials,
TRE/GFR statistics and report emission.

Trials are independently seeded from (seed, dataset, trial), so results are
identical for any worker count and execution order; records are collected in
a fixed (dataset, trial, method) order.
"""

from __future__ import annotations

import concurrent.futures
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import registration as reg
from . import se3
from .nn.checkpoint import load_checkpoint
from .phantom import LandmarkSet, PhantomParams, Volume3D, generate_phantom, insert_rod
from .projection import CameraGeometry, biplane_geometries, render_drr
from .registration import NetworkPolicy, OraclePolicy, RegistrationRunConfig
from .se3 import RigidTransform
from .serialization import save_image_pgm

DEG = math.pi / 180.0

METHOD_ORDER = ["start", "agt_s", "agt_m", "agt_m_opt", "baseline", "oracle_s", "oracle_m"]
AGENT_METHODS = {"agt_s", "agt_m", "agt_m_opt"}


@dataclass(frozen=True)
class ExperimentConfig:
    n_datasets: int = 1
    trials: int = 10
    methods: tuple = ("agt_s", "agt_m", "agt_m_opt", "baseline")
    seed: int = 0
    translation_max: float = 20.0  # mm
    rotation_max: float = 10.0  # degrees
    gt_translation_max: float = 5.0
    gt_rotation_max: float = 5.0
    steps: int = 50
    views: int = 2
    separation_deg: float = 90.0
    image_dims: tuple = (128, 128)
    pixel_spacing: tuple = (1.5, 1.5)
    source_to_detector: float = 1000.0
    source_to_center: float = 600.0
    confidence_threshold: float = 0.67
    fallback_fraction: float = 0.10
    baseline_budget: int = 120
    rod_occluder: bool = True
    rod_radius: float = 2.5
    rod_intensity: float = 3.0
    phantom: dict = field(default_factory=dict)  # PhantomParams overrides
    checkpoint: str | None = None
    step_mm: float | None = None
    workers: int = 1
    save_confidence_maps: bool = True

    def __post_init__(self):
        if self.views == 2 and self.separation_deg < 60.0:
            raise ValueError("bi-plane views must be at least 60 degrees apart")
        if self.translation_max <= 0 or self.rotation_max <= 0:
            raise ValueError("perturbation ranges must be positive")
        unknown = set(self.methods) - set(METHOD_ORDER)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")

    def geometries(self) -> list[CameraGeometry]:
        return biplane_geometries(
            source_to_detector=self.source_to_detector,
            source_to_center=self.source_to_center,
            image_dims=tuple(self.image_dims),
            pixel_spacing=tuple(self.pixel_spacing),
            separation_deg=self.separation_deg,
            n_views=self.views,
        )


@dataclass(frozen=True)
class ResultRecord:
    dataset_id: int
    trial_id: int
    method: str
    tre_mm: float
    steps: int
    wall_clock_s: float
    pose: list
    success: bool  # tre <= 10 mm

    def __post_init__(self):
        if self.tre_mm < 0:
            raise ValueError("tre must be non-negative")


def compute_tre(landmarks: LandmarkSet, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    """RMS displacement of the seven landmarks between the two poses."""
    diff = t_est.apply(landmarks.points) - t_gt.apply(landmarks.points)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics (numpy default)."""
    return float(np.percentile(np.asarray(values, dtype=float), q))


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_ground_truth(volume: Volume3D, cfg: ExperimentConfig, rng) -> RigidTransform:
    angle = rng.uniform(0.0, cfg.gt_rotation_max) * DEG
    rot = se3.rotation_about_point(_random_unit(rng), angle, volume.center)
    shift = rng.uniform(0.0, cfg.gt_translation_max) * _random_unit(rng)
    return se3.compose(RigidTransform.from_translation(shift), rot)


def sample_perturbation(volume: Volume3D, t_g: RigidTransform, cfg: ExperimentConfig, rng) -> RigidTransform:
    """Initial pose: t_g disturbed within the configured ranges.

    Translation: uniform direction, uniform magnitude in [0, max]. Rotation:
    uniform axis, uniform angle in [0, max], about the transformed volume
    center.
    """
    angle = rng.uniform(0.0, cfg.rotation_max) * DEG
    rot = se3.rotation_about_point(_random_unit(rng), angle, t_g.apply(volume.center))
    shift = rng.uniform(0.0, cfg.translation_max) * _random_unit(rng)
    return se3.compose(RigidTransform.from_translation(shift), se3.compose(rot, t_g))


def build_dataset(cfg: ExperimentConfig, dataset_index: int):
    """(clean volume, landmarks, fixed-source volume) for one dataset seed."""
    overrides = dict(cfg.phantom)
    overrides.setdefault("seed", cfg.seed * 1000 + dataset_index)
    params = PhantomParams(**overrides)
    volume, landmarks = generate_phantom(params)
    fixed_source = volume
    if cfg.rod_occluder:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, dataset_index, 7]))
        lo, hi = volume.bounds()
        y0 = rng.uniform(0.3, 0.7) * (hi[1] - lo[1]) + lo[1]
        z0 = rng.uniform(-8.0, 8.0)
        fixed_source = insert_rod(
            volume,
            start=(lo[0] - 1.0, y0, z0),
            end=(hi[0] + 1.0, y0 + rng.uniform(-15.0, 15.0), z0),
            radius=cfg.rod_radius,
            intensity=cfg.rod_intensity,
        )
    return volume, landmarks, fixed_source


def run_single_trial(cfg: ExperimentConfig, dataset_index: int, trial_index: int):
    """All requested methods for one (dataset, trial); returns records plus
    an optional confidence-map image."""
    volume, landmarks, fixed_source = build_dataset(cfg, dataset_index)
    geometries = cfg.geometries()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, dataset_index, trial_index]))
    t_g = sample_ground_truth(volume, cfg, rng)
    t_init = sample_perturbation(volume, t_g, cfg, rng)
    views = [
        bl.View(geometry=g, fixed=render_drr(fixed_source, t_g, g, cfg.step_mm))
        for g in geometries
    ]

    params = None
    if cfg.checkpoint is not None and Path(cfg.checkpoint).exists():
        params, _ = load_checkpoint(cfg.checkpoint)

    records = [
        ResultRecord(
            dataset_id=dataset_index,
            trial_id=trial_index,
            method="start",
            tre_mm=compute_tre(landmarks, t_init, t_g),
            steps=0,
            wall_clock_s=0.0,
            pose=t_init.to_json(),
            success=compute_tre(landmarks, t_init, t_g) <= 10.0,
        )
    ]
    conf_map = None
    agt_m_final = None
    methods = [m for m in METHOD_ORDER if m in cfg.methods]
    run_cfg = RegistrationRunConfig(
        steps=cfg.steps,
        confidence_threshold=cfg.confidence_threshold,
        fallback_fraction=cfg.fallback_fraction,
        views=cfg.views,
        step_mm=cfg.step_mm,
    )
    baseline_seed = int(
        np.random.SeedSequence([cfg.seed, dataset_index, trial_index, 11]).generate_state(1)[0]
    )

    for method in methods:
        if method in AGENT_METHODS and params is None:
            continue  # skipped with notice by the caller
        started = time.perf_counter()
        steps_taken = cfg.steps
        if method == "agt_s":
            policy = NetworkPolicy(params, [v.fixed for v in views], cfg.step_mm)
            traj = reg.register(volume, views, t_init, policy,
                                _with_mode(run_cfg, "agt_s"), t_g)
            pose = reg.final_pose(traj)
        elif method in ("agt_m", "agt_m_opt"):
            if agt_m_final is None:
                policy = NetworkPolicy(params, [v.fixed for v in views], cfg.step_mm)
                traj = reg.register(volume, views, t_init, policy,
                                    _with_mode(run_cfg, "agt_m"), t_g)
                agt_m_final = reg.final_pose(traj)
                agt_m_elapsed = time.perf_counter() - started
                if cfg.save_confidence_maps and trial_index == 0 and conf_map is None:
                    est, valid = policy.dense(volume, geometries[0], t_init, 0)
                    decisions = reg.decisions_from_estimates(est, valid)
                    conf_map = reg.confidence_map_image(
                        decisions, (est.shape[1], est.shape[0])
                    )
            pose = agt_m_final
            if method == "agt_m_opt":
                pose = bl.refine_local(volume, views, agt_m_final, step_mm=cfg.step_mm)
        elif method == "baseline":
            pose = bl.optimize_registration(
                volume, views, t_init, budget=cfg.baseline_budget,
                seed=baseline_seed, step_mm=cfg.step_mm,
            )
            pose = bl.refine_local(volume, views, pose, step_mm=cfg.step_mm)
            steps_taken = cfg.baseline_budget
        elif method == "oracle_s":
            traj = reg.register(volume, views, t_init, OraclePolicy(t_g),
                                _with_mode(run_cfg, "agt_s"), t_g)
            pose = reg.final_pose(traj)
        elif method == "oracle_m":
            traj = reg.register(volume, views, t_init, OraclePolicy(t_g),
                                _with_mode(run_cfg, "agt_m"), t_g)
            pose = reg.final_pose(traj)
        else:
            continue
        elapsed = time.perf_counter() - started
        if method == "agt_m":
            elapsed = agt_m_elapsed
        tre = compute_tre(landmarks, pose, t_g)
        records.append(
            ResultRecord(
                dataset_id=dataset_index,
                trial_id=trial_index,
                method=method,
                tre_mm=tre,
                steps=steps_taken,
                wall_clock_s=elapsed,
                pose=pose.to_json(),
                success=tre <= 10.0,
            )
        )
    return records, conf_map


def _with_mode(cfg: RegistrationRunConfig, mode: str) -> RegistrationRunConfig:
    return RegistrationRunConfig(
        mode=mode,
        steps=cfg.steps,
        confidence_threshold=cfg.confidence_threshold,
        fallback_fraction=cfg.fallback_fraction,
        views=cfg.views,
        step_mm=cfg.step_mm,
    )


def _trial_worker(cfg_dict: dict, dataset_index: int, trial_index: int):
    cfg = ExperimentConfig(**cfg_dict)
    records, conf_map = run_single_trial(cfg, dataset_index, trial_index)
    return (
        dataset_index,
        trial_index,
        [asdict(r) for r in records],
        None if conf_map is None else (conf_map.dims, conf_map.data.tolist()),
    )


def run_benchmark(cfg: ExperimentConfig):
    """All datasets x trials x methods; returns (records, notices, extras)."""
    notices = []
    wants_agents = bool(AGENT_METHODS & set(cfg.methods))
    if wants_agents and (cfg.checkpoint is None or not Path(cfg.checkpoint).exists()):
        notices.append(
            "checkpoint missing: skipping agent methods "
            f"({sorted(AGENT_METHODS & set(cfg.methods))})"
        )
    tasks = [(d, t) for d in range(cfg.n_datasets) for t in range(cfg.trials)]
    all_records: list[ResultRecord] = []
    conf_maps = {}
    if cfg.workers > 1:
        cfg_dict = asdict(cfg)
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_trial_worker, cfg_dict, d, t) for d, t in tasks]
            for fut in concurrent.futures.as_completed(futures):
                d, t, recs, cmap = fut.result()
                all_records.extend(ResultRecord(**r) for r in recs)
                if cmap is not None:
                    from .projection import Image2D

                    conf_maps[d] = Image2D(
                        dims=tuple(cmap[0]), pixel_spacing=(1.0, 1.0), data=np.array(cmap[1])
                    )
    else:
        for d, t in tasks:
            records, cmap = run_single_trial(cfg, d, t)
            all_records.extend(records)
            if cmap is not None and d not in conf_maps:
                conf_maps[d] = cmap
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    all_records.sort(key=lambda r: (r.dataset_id, r.trial_id, order[r.method]))
    return all_records, notices, {"confidence_maps": conf_maps}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_HEADER = "dataset_id,trial_id,method,tre_mm,gfr_flag,steps,wall_clock_s,pose_16_floats"


def results_to_csv(records: list[ResultRecord]) -> str:
    lines = [CSV_HEADER]
    for r in records:
        pose = " ".join(repr(float(x)) for x in r.pose)
        lines.append(
            f"{r.dataset_id},{r.trial_id},{r.method},{repr(float(r.tre_mm))},"
            f"{0 if r.success else 1},{r.steps},{r.wall_clock_s:.3f},{pose}"
        )
    return "\n".join(lines) + "\n"


def summarize(records: list[ResultRecord]) -> dict:
    """Per-method GFR, median/75th/95th percentile TRE and mean runtime."""
    summary = {}
    for method in METHOD_ORDER:
        rows = [r for r in records if r.method == method]
        if not rows:
            continue
        tres = [r.tre_mm for r in rows]
        summary[method] = {
            "n": len(rows),
            "gfr": float(np.mean([0.0 if r.success else 1.0 for r in rows])),
            "median_tre_mm": percentile(tres, 50.0),
            "p75_tre_mm": percentile(tres, 75.0),
            "p95_tre_mm": percentile(tres, 95.0),
            "mean_runtime_s": float(np.mean([r.wall_clock_s for r in rows])),
        }
    return summary


def summary_table(summary: dict) -> str:
    """Plain-text table in the benchmark layout (method rows, GFR/TRE columns)."""
    lines = [
        f"{'Method':<10} {'GFR':>7} {'Median':>8} {'75%':>8} {'95%':>8} {'Run Time':>9}",
        "-" * 55,
    ]
    for method in METHOD_ORDER:
        if method not in summary:
            continue
        s = summary[method]
        lines.append(
            f"{method:<10} {100.0 * s['gfr']:>6.1f}% {s['median_tre_mm']:>8.2f} "
            f"{s['p75_tre_mm']:>8.2f} {s['p95_tre_mm']:>8.2f} {s['mean_runtime_s']:>8.2f}s"
        )
    return "\n".join(lines) + "\n"


def emit_reports(records: list[ResultRecord], out_dir, extras: dict | None = None) -> dict:
    """Write results.csv, summary.json, table.txt and confidence-map PGMs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_to_csv(records))
    summary = summarize(records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "table.txt").write_text(summary_table(summary))
    if extras:
        for d, img in extras.get("confidence_maps", {}).items():
            save_image_pgm(out / f"confidence_map_dataset{d}", img)
    return summary


def load_results_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError("unexpected results.csv header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            {
                "dataset_id": int(parts[0]),
                "trial_id": int(parts[1]),
                "method": parts[2],
                "tre_mm": float(parts[3]),
                "gfr_flag": int(parts[4]),
                "steps": int(parts[5]),
                "wall_clock_s": float(parts[6]),
                "pose": [float(x) for x in parts[7].split()],
            }
        )
    return rows
