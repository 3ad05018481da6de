"""Training-pair generation and the two training regimes: dense dilated-FCN
training and per-ROI CNN training.

Both regimes share pose sampling, network initialization, the whole-image
intensity normalization convention and the evaluation machinery, so their
training curves are directly comparable. The FCN regime encodes each full
image once, shifts the moving feature map to simulate in-plane translations
and supervises every valid ROI anchor densely; the CNN regime samples the
in-plane translation explicitly, renders it, and supervises one random ROI
per sample.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import mdp, se3
from .mdp import ROI_HALF, ROI_SIZE
from .nn import policy as nnp
from .phantom import Volume3D
from .projection import (
    CameraGeometry,
    Image2D,
    extract_roi,
    normalized_image,
    render_drr,
)
from .se3 import RigidTransform, Se3Vector

DEG = math.pi / 180.0


@dataclass(frozen=True)
class TrainConfig:
    rotation_offset_max: float = 10.0  # degrees
    shift_max: float = 20.0  # mm, in-plane
    shifts_per_pair: int = 4
    batch_pairs: int = 4  # cnn mode: ROI samples per update
    learning_rate: float = 1e-3
    max_hours: float | None = 4.0
    max_samples: int | None = 200_000  # supervised scalar targets
    seed: int = 0
    mode: str = "fcn"
    depth_offset_max: float = 10.0  # mm along the view normal
    gt_rotation_max: float = 5.0  # degrees, ground-truth pose variability
    gt_translation_max: float = 5.0  # mm
    width_div: int = 4
    output_dim: int = 12
    eval_every_pairs: int = 40
    step_mm: float | None = None

    def __post_init__(self):
        if self.mode not in ("fcn", "cnn"):
            raise ValueError("mode must be 'fcn' or 'cnn'")
        for name in ("rotation_offset_max", "shift_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_hours is None and self.max_samples is None:
            raise ValueError("set max_hours or max_samples")


@dataclass(frozen=True)
class TrainingPair:
    fixed_image: Image2D
    moving_image: Image2D
    t: RigidTransform
    t_g: RigidTransform
    geometry: CameraGeometry

    def __post_init__(self):
        if self.fixed_image.dims != self.moving_image.dims:
            raise ValueError("pair images must share dims")


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_ground_truth_pose(volume: Volume3D, cfg: TrainConfig, rng) -> RigidTransform:
    angle = rng.uniform(0.0, cfg.gt_rotation_max) * DEG
    rot = se3.rotation_about_point(_random_unit(rng), angle, volume.center)
    shift = rng.uniform(0.0, cfg.gt_translation_max) * _random_unit(rng)
    return se3.compose(RigidTransform.from_translation(shift), rot)


def sample_pose_pair(
    volume: Volume3D, geometry: CameraGeometry, cfg: TrainConfig, rng
) -> tuple[RigidTransform, RigidTransform]:
    """(t, t_g): ground truth plus a rotation-and-depth offset.

    In-plane translation is deliberately absent: the FCN regime supplies it
    by feature-map shifting and the CNN regime samples it explicitly.
    """
    t_g = sample_ground_truth_pose(volume, cfg, rng)
    angle = rng.uniform(0.0, cfg.rotation_offset_max) * DEG
    center_world = t_g.apply(volume.center)
    rot = se3.rotation_about_point(_random_unit(rng), angle, center_world)
    depth = rng.uniform(-cfg.depth_offset_max, cfg.depth_offset_max)
    normal = np.cross(geometry.axis_u, geometry.axis_v)
    t = se3.compose(
        RigidTransform.from_translation(depth * normal), se3.compose(rot, t_g)
    )
    return t, t_g


def sample_pair(
    volume: Volume3D, landmarks, geometry: CameraGeometry, cfg: TrainConfig, rng
) -> TrainingPair:
    """Render a fixed/moving image pair for one sampled pose pair."""
    t, t_g = sample_pose_pair(volume, geometry, cfg, rng)
    fixed = render_drr(volume, t_g, geometry, cfg.step_mm)
    moving = render_drr(volume, t, geometry, cfg.step_mm)
    return TrainingPair(fixed_image=fixed, moving_image=moving, t=t, t_g=t_g, geometry=geometry)


def in_plane_translation(geometry: CameraGeometry, dx_mm: float, dy_mm: float) -> RigidTransform:
    return RigidTransform.from_translation(dx_mm * geometry.axis_u + dy_mm * geometry.axis_v)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalState:
    fixed_norm: np.ndarray
    moving_norm: np.ndarray
    true_map: mdp.RewardMap
    anchors: np.ndarray  # (k, 2) of (y, x) map anchors


def make_eval_states(
    volume: Volume3D,
    geometries: list[CameraGeometry],
    cfg: TrainConfig,
    seed: int,
    n_states: int = 16,
    anchors_per_state: int = 64,
) -> list[EvalState]:
    """Held-out states with full six-DoF offsets rendered for real.

    Translations are sampled up to ``shift_max`` (including in-plane, which
    the FCN regime never renders during training), rotations up to
    ``rotation_offset_max``.
    """
    rng = np.random.default_rng(seed)
    states = []
    for i in range(n_states):
        geometry = geometries[i % len(geometries)]
        t_g = sample_ground_truth_pose(volume, cfg, rng)
        angle = rng.uniform(0.0, cfg.rotation_offset_max) * DEG
        rot = se3.rotation_about_point(_random_unit(rng), angle, t_g.apply(volume.center))
        shift = rng.uniform(0.0, cfg.shift_max) * _random_unit(rng)
        t = se3.compose(RigidTransform.from_translation(shift), se3.compose(rot, t_g))

        fixed = render_drr(volume, t_g, geometry, cfg.step_mm)
        moving = render_drr(volume, t, geometry, cfg.step_mm)
        true_map = mdp.ground_truth_reward_map(geometry, volume, t, t_g)
        ys, xs = np.nonzero(true_map.valid)
        if len(ys) == 0:
            continue
        pick = rng.choice(len(ys), size=min(anchors_per_state, len(ys)), replace=False)
        anchors = np.stack([ys[pick], xs[pick]], axis=1)
        states.append(
            EvalState(
                fixed_norm=normalized_image(fixed).data,
                moving_norm=normalized_image(moving).data,
                true_map=true_map,
                anchors=anchors,
            )
        )
    return states


def dense_estimates(params: nnp.PolicyNetworkParams, fixed_norm, moving_norm) -> np.ndarray:
    """(h, w, 12) per-action estimates from the dilated network."""
    fcn = nnp.to_dilated_fcn(params)
    ff = nnp.fcn_encode(fcn.encoder_fixed, fixed_norm)
    fm = nnp.fcn_encode(fcn.encoder_moving, moving_norm)
    out = nnp.dense_decode(fcn.decoder, ff, fm)
    return nnp.expand_action_estimates(np.moveaxis(out, 0, -1), params.output_dim)


def correct_action_rate(predictor, eval_states: list[EvalState]) -> float:
    """Fraction of evaluated (state, ROI) samples whose argmax action has a
    true reward > 0.

    ``predictor`` is PolicyNetworkParams or a callable mapping an EvalState
    to an (h, w, 12) estimate array (used to plug in oracles).
    """
    if not eval_states:
        raise ValueError("empty evaluation set")
    hits = 0
    total = 0
    for state in eval_states:
        if callable(predictor):
            est = predictor(state)
        else:
            est = dense_estimates(predictor, state.fixed_norm, state.moving_norm)
        ys = state.anchors[:, 0]
        xs = state.anchors[:, 1]
        choice = np.argmax(est[ys, xs], axis=1)
        true = state.true_map.rewards[ys, xs, :]
        hits += int(np.sum(true[np.arange(len(choice)), choice] > 0.0))
        total += len(choice)
    return hits / total


def agent_confidence_stats(
    predictor, eval_states: list[EvalState]
) -> tuple[np.ndarray, np.ndarray]:
    """(confidences, correct flags) over all evaluated anchors."""
    confs = []
    correct = []
    for state in eval_states:
        if callable(predictor):
            est = predictor(state)
        else:
            est = dense_estimates(predictor, state.fixed_norm, state.moving_norm)
        ys = state.anchors[:, 0]
        xs = state.anchors[:, 1]
        picked = est[ys, xs]
        choice = np.argmax(picked, axis=1)
        confs.append(picked[np.arange(len(choice)), choice])
        true = state.true_map.rewards[ys, xs, :]
        correct.append(true[np.arange(len(choice)), choice] > 0.0)
    return np.concatenate(confs), np.concatenate(correct)


def calibrate_confidence_threshold(
    confidences: np.ndarray, correct: np.ndarray, target_rate: float = 0.95
) -> float | None:
    """Smallest threshold whose selected actions are >= target_rate correct.

    Scans the observed confidence quantiles; None when no threshold attains
    the target while keeping at least 5% of the agents.
    """
    order = np.argsort(-confidences)
    sorted_correct = correct[order]
    cum_correct = np.cumsum(sorted_correct)
    counts = np.arange(1, len(order) + 1)
    rates = cum_correct / counts
    min_keep = max(1, int(0.05 * len(order)))
    valid = np.nonzero(rates[min_keep - 1 :] >= target_rate)[0]
    if len(valid) == 0:
        return None
    k = min_keep - 1 + valid[-1]
    return float(confidences[order][k])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainLogger:
    path: object = None
    records: list = field(default_factory=list)

    def log(self, wall_clock_s: float, samples_seen: int, loss: float, rate):
        rec = {
            "wall_clock_s": round(float(wall_clock_s), 3),
            "samples_seen": int(samples_seen),
            "loss": float(loss),
            "correct_action_rate": None if rate is None else float(rate),
        }
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")


def _budget_exhausted(cfg: TrainConfig, started: float, samples: int) -> bool:
    if cfg.max_samples is not None and samples >= cfg.max_samples:
        return True
    if cfg.max_hours is not None and (time.perf_counter() - started) >= cfg.max_hours * 3600.0:
        return True
    return False


def _shift_budget_px(data: mdp.PairRewardData, cfg: TrainConfig) -> int:
    return max(1, int(round(cfg.shift_max / data.mm_per_pixel_shift)))


def train_fcn(
    volumes: list[Volume3D],
    geometries: list[CameraGeometry],
    cfg: TrainConfig,
    eval_states: list[EvalState] | None = None,
    logger: TrainLogger | None = None,
    params: nnp.PolicyNetworkParams | None = None,
):
    """Dense dilated-FCN training; returns (params, log records)."""
    if not volumes:
        raise ValueError("at least one training volume required")
    logger = logger or TrainLogger()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = nnp.init_policy_network(
            cfg.seed, output_dim=cfg.output_dim, width_div=cfg.width_div, dtype=np.float32
        )
    fcn = nnp.to_dilated_fcn(params)
    started = time.perf_counter()
    samples = 0
    pair_index = 0
    recent_losses: list[float] = []
    while not _budget_exhausted(cfg, started, samples):
        volume = volumes[pair_index % len(volumes)]
        geometry = geometries[pair_index % len(geometries)]
        pair = sample_pair(volume, None, geometry, cfg, rng)
        data = mdp.precompute_pair_data(geometry, volume, pair.t, pair.t_g)

        fixed_norm = normalized_image(pair.fixed_image).data
        moving_norm = normalized_image(pair.moving_image).data
        ff, shape_f, tape_f = nnp.fcn_encode(fcn.encoder_fixed, fixed_norm, want_cache=True)
        fm, shape_m, tape_m = nnp.fcn_encode(fcn.encoder_moving, moving_norm, want_cache=True)

        max_px = _shift_budget_px(data, cfg)
        for _ in range(cfg.shifts_per_pair):
            shift_px = rng.integers(-max_px, max_px + 1, size=2)
            shift_mm = shift_px * data.mm_per_pixel_shift
            target = mdp.reward_map_for_shift(data, shift_mm)
            try:
                loss = nnp.fcn_train_step(
                    params, fcn, ff, tape_f, shape_f, fm, tape_m, shape_m,
                    (int(shift_px[0]), int(shift_px[1])), target.rewards, target.valid,
                    cfg.learning_rate,
                )
            except nnp.NonFiniteGradients:
                raise TrainingDiverged(
                    "non-finite loss/gradients in fcn training",
                    {"pair_index": pair_index, "samples_seen": samples},
                )
            n_valid = int(
                np.sum(target.valid & nnp.shift_valid_mask(target.valid.shape, shift_px))
            )
            samples += n_valid * params.output_dim
            recent_losses.append(loss)

        pair_index += 1
        if pair_index % cfg.eval_every_pairs == 0 or _budget_exhausted(cfg, started, samples):
            rate = correct_action_rate(params, eval_states) if eval_states else None
            logger.log(time.perf_counter() - started, samples,
                       float(np.mean(recent_losses)), rate)
            recent_losses.clear()
    if not logger.records:
        rate = correct_action_rate(params, eval_states) if eval_states else None
        logger.log(time.perf_counter() - started, samples,
                   float(np.mean(recent_losses)) if recent_losses else float("nan"), rate)
    return params, logger.records


def cnn_sample_targets(
    volume: Volume3D,
    geometry: CameraGeometry,
    pair_t: RigidTransform,
    pair_t_g: RigidTransform,
    anchor_yx,
) -> np.ndarray:
    """Ground-truth rewards for one ROI anchor (single-pixel map)."""
    data = mdp.precompute_pair_data(geometry, volume, pair_t, pair_t_g)
    rm = mdp.reward_map_for_shift(data, (0.0, 0.0))
    y, x = anchor_yx
    if not rm.valid[y, x]:
        raise ValueError("anchor has no defined agent frame")
    return rm.rewards[y, x]


def train_cnn(
    volumes: list[Volume3D],
    geometries: list[CameraGeometry],
    cfg: TrainConfig,
    eval_states: list[EvalState] | None = None,
    logger: TrainLogger | None = None,
    params: nnp.PolicyNetworkParams | None = None,
):
    """Per-ROI CNN training (the efficiency baseline); returns (params, log)."""
    if not volumes:
        raise ValueError("at least one training volume required")
    logger = logger or TrainLogger()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = nnp.init_policy_network(
            cfg.seed, output_dim=cfg.output_dim, width_div=cfg.width_div, dtype=np.float32
        )
    started = time.perf_counter()
    samples = 0
    pair_index = 0
    recent_losses: list[float] = []
    while not _budget_exhausted(cfg, started, samples):
        batch = []
        for _ in range(cfg.batch_pairs):
            volume = volumes[pair_index % len(volumes)]
            geometry = geometries[pair_index % len(geometries)]
            t, t_g = sample_pose_pair(volume, geometry, cfg, rng)
            dx, dy = rng.uniform(-cfg.shift_max, cfg.shift_max, size=2)
            t_full = se3.compose(in_plane_translation(geometry, dx, dy), t)

            data = mdp.precompute_pair_data(geometry, volume, t_full, t_g)
            ys, xs = np.nonzero(data.valid)
            if len(ys) == 0:
                pair_index += 1
                continue
            k = rng.integers(0, len(ys))
            anchor = (int(ys[k]), int(xs[k]))
            target12 = mdp.reward_map_for_shift(data, (0.0, 0.0)).rewards[anchor[0], anchor[1]]

            fixed = render_drr(volume, t_g, geometry, cfg.step_mm)
            moving = render_drr(volume, t_full, geometry, cfg.step_mm)
            fixed_norm = normalized_image(fixed)
            moving_norm = normalized_image(moving)
            center = (anchor[1] + ROI_HALF, anchor[0] + ROI_HALF)
            roi_f = extract_roi(fixed_norm, center, (ROI_SIZE, ROI_SIZE),
                                fixed.pixel_spacing, normalize=False)
            roi_m = extract_roi(moving_norm, center, (ROI_SIZE, ROI_SIZE),
                                moving.pixel_spacing, normalize=False)
            batch.append(
                (roi_f.data, roi_m.data,
                 nnp.reduce_action_targets(target12, params.output_dim))
            )
            pair_index += 1
        if not batch:
            continue
        try:
            _, loss = nnp.train_step(params, batch, cfg.learning_rate)
        except nnp.NonFiniteGradients:
            raise TrainingDiverged(
                "non-finite loss/gradients in cnn training",
                {"pair_index": pair_index, "samples_seen": samples},
            )
        samples += len(batch) * params.output_dim
        recent_losses.append(loss)
        if (pair_index // cfg.batch_pairs) % max(1, cfg.eval_every_pairs) == 0 or \
                _budget_exhausted(cfg, started, samples):
            rate = correct_action_rate(params, eval_states) if eval_states else None
            logger.log(time.perf_counter() - started, samples,
                       float(np.mean(recent_losses)), rate)
            recent_losses.clear()
    if not logger.records:
        rate = correct_action_rate(params, eval_states) if eval_states else None
        logger.log(time.perf_counter() - started, samples,
                   float(np.mean(recent_losses)) if recent_losses else float("nan"), rate)
    return params, logger.records
