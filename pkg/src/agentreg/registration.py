"""Inference: single-agent, multi-agent with confidence gating and chordal
aggregation, and the optimization-refined variant, for one or two views.

Bi-plane runs obtain one aggregated motion per view per step and apply them
sequentially in a fixed view order (view 0, then view 1); determinism, not
commutativity, is the contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import baseline as bl
from . import mdp, se3
from .mdp import ACTIONS, ROI_HALF, ROI_SIZE, ActionSpec
from .nn import policy as nnp
from .phantom import Volume3D
from .projection import (
    AgentOriginUndefined,
    CameraGeometry,
    Image2D,
    agent_frame_for_pixel,
    agent_origin_grid,
    center_pixel,
    extract_roi,
    image_from_world,
    normalized_image,
    render_drr,
    world_frame,
)
from .se3 import RigidTransform


@dataclass(frozen=True)
class AgentDecision:
    pixel: tuple  # (x, y) dense-map anchor; ROI center is anchor + 30
    confidence: float  # max of the agent's per-action estimates
    action: ActionSpec  # the corresponding argmax

    def __post_init__(self):
        object.__setattr__(self, "pixel", (int(self.pixel[0]), int(self.pixel[1])))


@dataclass(frozen=True)
class RegistrationRunConfig:
    mode: str = "agt_m"  # agt_s | agt_m | agt_m_opt
    steps: int = 50
    confidence_threshold: float = 0.67
    fallback_fraction: float = 0.10
    views: int = 2
    step_mm: float | None = None
    renormalize_every: int = 10  # registration loops re-orthonormalize poses

    def __post_init__(self):
        if self.mode not in ("agt_s", "agt_m", "agt_m_opt"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not math.isfinite(self.confidence_threshold):
            raise ValueError("confidence threshold must be finite")
        if not 0.0 < self.fallback_fraction <= 1.0:
            raise ValueError("fallback_fraction must be in (0, 1]")
        if self.views not in (1, 2):
            raise ValueError("views must be 1 or 2")


def decisions_from_estimates(estimates: np.ndarray, valid: np.ndarray | None = None) -> list[AgentDecision]:
    """One decision per (valid) dense-map anchor from (h, w, 12) estimates."""
    h, w, _ = estimates.shape
    choice = np.argmax(estimates, axis=2)
    conf = np.take_along_axis(estimates, choice[..., None], axis=2)[..., 0]
    out = []
    for y in range(h):
        for x in range(w):
            if valid is not None and not valid[y, x]:
                continue
            out.append(
                AgentDecision(pixel=(x, y), confidence=float(conf[y, x]),
                              action=ACTIONS[int(choice[y, x])])
            )
    return out


def agent_decisions(
    params: nnp.PolicyNetworkParams,
    fixed: Image2D,
    moving: Image2D,
    valid: np.ndarray | None = None,
) -> list[AgentDecision]:
    """Dense network inference over every ROI anchor of the image pair."""
    if fixed.dims[0] < ROI_SIZE or fixed.dims[1] < ROI_SIZE:
        raise ValueError("images smaller than the receptive field")
    from .training import dense_estimates  # local import to avoid a cycle

    est = dense_estimates(params, normalized_image(fixed).data, normalized_image(moving).data)
    return decisions_from_estimates(est, valid)


def select_agents(
    decisions: list[AgentDecision], threshold: float, fallback_fraction: float
) -> list[AgentDecision]:
    """Confidence gating with a top-fraction fallback.

    Agents above the threshold are selected; if fewer than
    ceil(fallback_fraction * N) qualify, the top that many by confidence are
    taken instead (ties resolved by pixel order, so the result is invariant
    to input ordering).
    """
    if not decisions:
        raise ValueError("no agent decisions to select from")
    canon = sorted(decisions, key=lambda d: (d.pixel[1], d.pixel[0]))
    above = [d for d in canon if d.confidence > threshold]
    quota = math.ceil(fallback_fraction * len(canon))
    if len(above) >= quota:
        return above
    order = sorted(range(len(canon)), key=lambda i: (-canon[i].confidence, i))
    return [canon[i] for i in sorted(order[:quota])]


def aggregate_actions(selected: list[AgentDecision]) -> RigidTransform:
    """Chordal mean of the selected agents' action motions."""
    if not selected:
        raise ValueError("cannot aggregate an empty selection")
    return se3.chordal_mean([mdp.action_matrix(d.action) for d in selected])


_ACTION_MATRICES = np.stack([mdp.action_matrix(a).matrix for a in ACTIONS])


def select_and_aggregate(
    estimates: np.ndarray, valid: np.ndarray, threshold: float, fallback_fraction: float
):
    """Vectorized selection + aggregation over a dense estimate map.

    Equivalent to decisions_from_estimates -> select_agents ->
    aggregate_actions (asserted by tests) without materializing per-agent
    objects; the chordal mean reduces to action-count averaging because only
    12 distinct motions occur.

    Returns (motion, n_selected, mean_confidence).
    """
    flat_choice = np.argmax(estimates, axis=2)[valid]
    flat_conf = np.max(estimates, axis=2)[valid]
    n = flat_conf.size
    if n == 0:
        raise ValueError("no agent decisions to select from")
    chosen = flat_conf > threshold
    quota = math.ceil(fallback_fraction * n)
    if int(np.sum(chosen)) < quota:
        # top quota by confidence, ties by pixel order
        order = np.lexsort((np.arange(n), -flat_conf))
        chosen = np.zeros(n, dtype=bool)
        chosen[order[:quota]] = True
    counts = np.bincount(flat_choice[chosen], minlength=len(ACTIONS)).astype(float)
    mean_mat = np.tensordot(counts / counts.sum(), _ACTION_MATRICES, axes=1)
    u, s, vt = np.linalg.svd(mean_mat[:3, :3])
    if np.linalg.det(u @ vt) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
    motion = RigidTransform.from_rotation_translation(u @ vt, mean_mat[:3, 3])
    return motion, int(np.sum(chosen)), float(np.mean(flat_conf[chosen]))


def apply_motion(t: RigidTransform, motion: RigidTransform, frame: RigidTransform) -> RigidTransform:
    return se3.compose(se3.inverse(frame), se3.compose(motion, se3.compose(frame, t)))


class OraclePolicy:
    """Ground-truth reward maps in place of the network (no rendering)."""

    def __init__(self, t_ground_truth: RigidTransform):
        self.t_g = t_ground_truth

    def dense(self, volume, geometry, pose):
        data = mdp.precompute_pair_data(geometry, volume, pose, self.t_g)
        rm = mdp.reward_map_for_shift(data, (0.0, 0.0))
        return rm.rewards, rm.valid

    def single(self, volume, geometry, pose, frame):
        f = world_frame(frame, geometry)
        return mdp.all_rewards(pose, f, self.t_g)


class NetworkPolicy:
    """Dilated-FCN inference for agt-m, per-ROI CNN inference for agt-s."""

    def __init__(self, params: nnp.PolicyNetworkParams, fixed_images: list[Image2D],
                 step_mm: float | None = None):
        self.params = params
        self.fcn = nnp.to_dilated_fcn(params)
        self.step_mm = step_mm
        self._fixed_norm = [normalized_image(img) for img in fixed_images]
        self._fixed_feat = [None] * len(fixed_images)

    def _fixed_features(self, view_index: int):
        if self._fixed_feat[view_index] is None:
            self._fixed_feat[view_index] = nnp.fcn_encode(
                self.fcn.encoder_fixed, self._fixed_norm[view_index].data
            )
        return self._fixed_feat[view_index]

    def dense(self, volume, geometry, pose, view_index: int):
        moving = render_drr(volume, pose, geometry, self.step_mm)
        fm = nnp.fcn_encode(self.fcn.encoder_moving, normalized_image(moving).data)
        out = nnp.dense_decode(self.fcn.decoder, self._fixed_features(view_index), fm)
        est = nnp.expand_action_estimates(np.moveaxis(out, 0, -1), self.params.output_dim)
        _, valid = agent_origin_grid(
            geometry, volume, pose,
            np.arange(est.shape[1]) + ROI_HALF, np.arange(est.shape[0]) + ROI_HALF,
        )
        return est, valid

    def single(self, volume, geometry, pose, frame, view_index: int):
        moving = render_drr(volume, pose, geometry, self.step_mm)
        center = center_pixel(geometry)
        roi_f = extract_roi(self._fixed_norm[view_index], center, (ROI_SIZE, ROI_SIZE),
                            geometry.pixel_spacing, normalize=False)
        roi_m = extract_roi(normalized_image(moving), center, (ROI_SIZE, ROI_SIZE),
                            geometry.pixel_spacing, normalize=False)
        ff = nnp.encoder_forward(self.params.encoder_fixed, roi_f.data)
        fm = nnp.encoder_forward(self.params.encoder_moving, roi_m.data)
        out = nnp.decoder_forward(self.params.decoder, ff, fm)
        return nnp.expand_action_estimates(out, self.params.output_dim)


def _center_frame(geometry, volume, pose, valid=None):
    """Frame of the image-center agent; nearest valid anchor as a fallback."""
    try:
        return agent_frame_for_pixel(geometry, volume, pose, center_pixel(geometry))
    except AgentOriginUndefined:
        if valid is None or not np.any(valid):
            raise
        ys, xs = np.nonzero(valid)
        cy = (valid.shape[0] - 1) / 2.0
        cx = (valid.shape[1] - 1) / 2.0
        k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        return agent_frame_for_pixel(
            geometry, volume, pose, (xs[k] + ROI_HALF, ys[k] + ROI_HALF)
        )


def register(
    volume: Volume3D,
    views: list[bl.View],
    t_init: RigidTransform,
    policy,
    cfg: RegistrationRunConfig,
    t_ground_truth: RigidTransform | None = None,
) -> list[dict]:
    """Run the registration loop; returns the full pose trajectory.

    Each step visits the views in order; the motion from each view is
    applied before the next view is evaluated. Trajectory entries carry the
    pose as a row-major 16-float list plus per-step diagnostics; length is
    steps * views + 1 (the initial entry has view -1).
    """
    if len(views) not in (1, 2) or len(views) != cfg.views:
        raise ValueError("view count must match the run config")
    pose = t_init
    trajectory = [_trajectory_entry(0, -1, pose, t_ground_truth, 0, float("nan"))]
    oracle = isinstance(policy, OraclePolicy)
    for step in range(1, cfg.steps + 1):
        for view_index, view in enumerate(views):
            geometry = view.geometry
            if cfg.mode in ("agt_m", "agt_m_opt"):
                if oracle:
                    est, valid = policy.dense(volume, geometry, pose)
                else:
                    est, valid = policy.dense(volume, geometry, pose, view_index)
                if not np.any(valid):
                    return trajectory  # lost the volume; abort with partial result
                motion, n_sel, mean_conf = select_and_aggregate(
                    est, valid, cfg.confidence_threshold, cfg.fallback_fraction
                )
                frame = world_frame(_center_frame(geometry, volume, pose, valid), geometry)
                pose = apply_motion(pose, motion, frame)
            else:
                try:
                    agent = _center_frame(geometry, volume, pose)
                except AgentOriginUndefined:
                    return trajectory
                if oracle:
                    rewards = policy.single(volume, geometry, pose, agent)
                else:
                    rewards = policy.single(volume, geometry, pose, agent, view_index)
                idx = int(np.argmax(rewards))
                frame = world_frame(agent, geometry)
                pose = mdp.apply_action(pose, ACTIONS[idx], frame)
                n_sel = 1
                mean_conf = float(rewards[idx])
            if cfg.renormalize_every and (step % cfg.renormalize_every == 0):
                pose = se3.renormalize(pose)
            trajectory.append(
                _trajectory_entry(step, view_index, pose, t_ground_truth, n_sel, mean_conf)
            )
    return trajectory


def _trajectory_entry(step, view, pose, t_g, n_selected, mean_confidence) -> dict:
    dist = float("nan")
    if t_g is not None:
        dist = se3.geodesic_distance(pose, t_g)
    return {
        "step": int(step),
        "view": int(view),
        "pose": pose.to_json(),
        "distance_to_gt": dist,
        "n_selected_agents": int(n_selected),
        "mean_confidence": float(mean_confidence),
    }


def final_pose(trajectory: list[dict]) -> RigidTransform:
    return RigidTransform.from_json(trajectory[-1]["pose"])


def confidence_map_image(decisions: list[AgentDecision], dims) -> Image2D:
    """Grayscale confidence image over the dense-map extent."""
    nx, ny = int(dims[0]), int(dims[1])
    data = np.zeros((ny, nx))
    for d in decisions:
        x, y = d.pixel
        if 0 <= y < ny and 0 <= x < nx:
            data[y, x] = d.confidence
    return Image2D(dims=(nx, ny), pixel_spacing=(1.0, 1.0), data=data)
