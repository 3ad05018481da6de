"""The registration decision process: action space, state transition, reward,
greedy oracle policy and dense ground-truth reward maps.

Action ordering is fixed: for generator i in 1..6, actions 2(i-1) and
2(i-1)+1 are the positive and negative step along that generator
(+tx, -tx, +ty, -ty, +tz, -tz, +rx, -rx, +ry, -ry, +rz, -rz). Translations
step 1 mm, rotations pi/180 rad.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import se3
from .phantom import Volume3D
from .projection import (
    CameraGeometry,
    agent_origin_grid,
    image_from_world,
    magnification_at_depth,
)
from .se3 import RigidTransform, Se3Vector

TRANSLATION_STEP_MM = 1.0
ROTATION_STEP_RAD = math.pi / 180.0
N_ACTIONS = 12

# FCN dense-map anchor k corresponds to the agent whose ROI center is image
# pixel k + ROI_HALF (61x61 ROIs).
ROI_SIZE = 61
ROI_HALF = 30


@dataclass(frozen=True)
class ActionSpec:
    generator_index: int  # 1..6
    sign: int  # +1 / -1
    step: float

    def __post_init__(self):
        if not 1 <= self.generator_index <= 6:
            raise ValueError("generator_index must be in 1..6")
        if self.sign not in (-1, 1):
            raise ValueError("sign must be +1 or -1")
        expected = TRANSLATION_STEP_MM if self.generator_index <= 3 else ROTATION_STEP_RAD
        if abs(self.step - expected) > 1e-12:
            raise ValueError("step does not match the generator class")

    @property
    def is_translation(self) -> bool:
        return self.generator_index <= 3

    @property
    def axis(self) -> int:
        return (self.generator_index - 1) % 3


def action_space() -> list[ActionSpec]:
    """The 12 actions in canonical order (+G1, -G1, ..., +G6, -G6)."""
    actions = []
    for gi in range(1, 7):
        step = TRANSLATION_STEP_MM if gi <= 3 else ROTATION_STEP_RAD
        actions.append(ActionSpec(gi, +1, step))
        actions.append(ActionSpec(gi, -1, step))
    return actions


ACTIONS = action_space()


def action_matrix(a: ActionSpec) -> RigidTransform:
    """exp(sign * step * G_i) as a rigid transform."""
    coeffs = np.zeros(6)
    coeffs[a.generator_index - 1] = a.sign * a.step
    return se3.se3_exp(Se3Vector.from_array(coeffs))


def apply_action(t: RigidTransform, a: ActionSpec, e: RigidTransform) -> RigidTransform:
    """One step in the frame ``e``: e^-1 o exp(A) o e o t."""
    return se3.compose(
        se3.inverse(e), se3.compose(action_matrix(a), se3.compose(e, t))
    )


@dataclass(frozen=True)
class RegistrationState:
    t_current: RigidTransform
    t_ground_truth: RigidTransform
    frame: object  # AgentFrame of the acting agent
    step_index: int = 0

    def __post_init__(self):
        if self.step_index < 0:
            raise ValueError("step_index must be non-negative")


def reward(t: RigidTransform, a: ActionSpec, e: RigidTransform, t_g: RigidTransform) -> float:
    """Distance reduction toward the ground truth, measured in the frame ``e``."""
    before = se3.geodesic_distance(se3.compose(e, t), se3.compose(e, t_g))
    t_next = apply_action(t, a, e)
    after = se3.geodesic_distance(se3.compose(e, t_next), se3.compose(e, t_g))
    return before - after


def all_rewards(t: RigidTransform, e: RigidTransform, t_g: RigidTransform) -> np.ndarray:
    return np.array([reward(t, a, e, t_g) for a in ACTIONS])


def greedy_oracle_policy(t: RigidTransform, e: RigidTransform, t_g: RigidTransform) -> ActionSpec:
    """Action with maximum true reward; ties break to the lowest index."""
    rewards = all_rewards(t, e, t_g)
    return ACTIONS[int(np.argmax(rewards))]


@dataclass(frozen=True)
class RewardMap:
    """Dense per-anchor, per-action rewards over the valid FCN output extent."""

    rewards: np.ndarray  # (ny, nx, 12), mixed mm/degree units
    valid: np.ndarray  # (ny, nx) bool

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float)
        v = np.asarray(self.valid, dtype=bool)
        if r.ndim != 3 or r.shape[2] != N_ACTIONS:
            raise ValueError("rewards must be (ny, nx, 12)")
        if v.shape != r.shape[:2]:
            raise ValueError("valid mask shape mismatch")
        if not np.all(np.isfinite(r[v])):
            raise ValueError("rewards at valid pixels must be finite")
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "valid", v)

    @property
    def dims(self) -> tuple:
        return (self.rewards.shape[1], self.rewards.shape[0])


@dataclass(frozen=True)
class PairRewardData:
    """Per-pair precomputation shared by all in-plane shifts.

    ``u`` holds the per-anchor translation coefficients (mm, agent frame) of
    the relative pose logarithm; ``w`` its rotation coefficients (shared by
    every anchor because agent frames differ only by translation).
    """

    u: np.ndarray  # (ny, nx, 3)
    w: np.ndarray  # (3,)
    valid: np.ndarray  # (ny, nx)
    origins: np.ndarray  # (ny, nx, 3) traced agent origins, world mm
    rotation_world_to_image: np.ndarray  # (3, 3)
    mm_per_pixel_shift: float  # in-plane mm per 1-pixel feature shift


def map_extent(g: CameraGeometry) -> tuple:
    nx, ny = g.image_dims
    return nx - (ROI_SIZE - 1), ny - (ROI_SIZE - 1)


def _relative_log_terms(t: RigidTransform, t_g: RigidTransform):
    """Rotation/translation of K = t o t_g^-1, with its rotation log."""
    k = se3.compose(t, se3.inverse(t_g))
    w_world = se3.so3_log(k.rotation)
    return k.rotation, k.translation, w_world


def precompute_pair_data(
    g: CameraGeometry,
    v: Volume3D,
    t: RigidTransform,
    t_g: RigidTransform,
    origins: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> PairRewardData:
    """Trace agent frames for every dense-map anchor and take the relative
    pose logarithm once.

    ``origins``/``valid`` may be supplied to pin the agent frames (used by
    consistency tests); by default they are traced with the pose ``t``.
    """
    mx, my = map_extent(g)
    if origins is None or valid is None:
        px = np.arange(mx) + ROI_HALF
        py = np.arange(my) + ROI_HALF
        origins, valid = agent_origin_grid(g, v, t, px, py)

    r_img = image_from_world(g).rotation
    r_k, t_k, w_world = _relative_log_terms(t, t_g)
    # Per anchor i: M_i = F_i K F_i^-1 with F_i = [r_img | -r_img c_i], so the
    # rotation part r_img R_K r_img^T is shared and the translation part is
    # r_img (t_K + (I - R_K) c_i).
    w = r_img @ w_world
    c = np.nan_to_num(origins, nan=0.0)
    tau = (t_k[None, None, :] + c @ (r_k - np.eye(3)).T) @ r_img.T
    u = tau @ se3._translation_jacobian_inv(w).T

    depth = source_depth_of_point(g, volume_center_world(v, t))
    mm_per_px = float(g.pixel_spacing[0]) / magnification_at_depth(g, depth)
    return PairRewardData(
        u=u, w=w, valid=valid, origins=origins,
        rotation_world_to_image=r_img, mm_per_pixel_shift=mm_per_px,
    )


def volume_center_world(v: Volume3D, t: RigidTransform) -> np.ndarray:
    return t.apply(v.center)


def source_depth_of_point(g: CameraGeometry, point: np.ndarray) -> float:
    """Distance from the source to the point's plane parallel to the detector."""
    return abs(float((point - g.source) @ g.normal))


def reward_map_for_shift(data: PairRewardData, shift_mm=(0.0, 0.0)) -> RewardMap:
    """Dense rewards after applying an in-plane shift to the translation
    coefficients (the precomputed-logarithm shortcut)."""
    shift = np.asarray(shift_mm, dtype=float).reshape(2)
    u = data.u + np.array([shift[0], shift[1], 0.0])[None, None, :]
    w = data.w

    before = se3.batch_tangent_norm(u, w)
    rewards = np.empty(u.shape[:2] + (N_ACTIONS,))

    v_jac = se3._translation_jacobian(w)
    v_inv = se3._translation_jacobian_inv(w)
    t_m = u @ v_jac.T  # translation of exp((u, w)) per anchor
    for idx, a in enumerate(ACTIONS):
        if a.is_translation:
            delta = np.zeros(3)
            delta[a.axis] = a.sign * a.step
            u_after = u + (v_inv @ delta)[None, None, :]
            after = se3.batch_tangent_norm(u_after, w)
        else:
            axis = np.zeros(3)
            axis[a.axis] = a.sign * a.step
            r_a = se3.so3_exp(axis)
            w_after = se3.so3_log(r_a @ se3.so3_exp(w))
            u_after = (t_m @ r_a.T) @ se3._translation_jacobian_inv(w_after).T
            after = se3.batch_tangent_norm(u_after, w_after)
        rewards[:, :, idx] = before - after
    rewards[~data.valid] = 0.0
    return RewardMap(rewards=rewards, valid=data.valid)


def ground_truth_reward_map(
    g: CameraGeometry,
    v: Volume3D,
    t: RigidTransform,
    t_g: RigidTransform,
    shift_mm=(0.0, 0.0),
) -> RewardMap:
    """Dense ground-truth rewards for one pose pair and in-plane shift."""
    shift = np.asarray(shift_mm, dtype=float).reshape(2)
    if np.any(np.abs(shift) > 20.0 + 1e-9):
        raise ValueError("shift outside the training range (<= 20 mm per axis)")
    return reward_map_for_shift(precompute_pair_data(g, v, t, t_g), shift)


def shifted_pose_for_targets(data: PairRewardData, t: RigidTransform, shift_mm) -> RigidTransform:
    """The single pose whose from-scratch reward map (with the same agent
    frames) equals the shifted-shortcut map exactly.

    Adding ``du`` to every anchor's translation coefficients corresponds to
    left-composing the pose with a world translation of
    V(w) du expressed back in world axes.
    """
    shift = np.asarray(shift_mm, dtype=float).reshape(2)
    du = np.array([shift[0], shift[1], 0.0])
    v_jac = se3._translation_jacobian(data.w)
    delta_world = data.rotation_world_to_image.T @ (v_jac @ du)
    return se3.compose(RigidTransform.from_translation(delta_world), t)
