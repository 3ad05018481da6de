"""Optimization-based registration baseline and the shared local refiner.

The global-ish search is an elitist annealed random search over the six pose
parameters (a stand-in for evolutionary strategies; a config hook allows a
different optimizer later). The local refiner is coordinate descent with a
shrinking trust region. Both maximize summed gradient correlation over the
views and parameterize perturbations in the image-center agent frame of
view 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import se3
from .phantom import Volume3D
from .projection import (
    CameraGeometry,
    Image2D,
    agent_frame_for_pixel,
    center_pixel,
    render_drr,
    world_frame,
)
from .se3 import RigidTransform, Se3Vector
from .similarity import gradient_correlation

DEG = math.pi / 180.0


@dataclass(frozen=True)
class View:
    geometry: CameraGeometry
    fixed: Image2D


def summed_gc(volume: Volume3D, views: list[View], pose: RigidTransform,
              step_mm: float | None = None) -> float:
    total = 0.0
    for view in views:
        drr = render_drr(volume, pose, view.geometry, step_mm)
        total += gradient_correlation(view.fixed, drr)
    return total


def center_agent_frame(volume: Volume3D, views: list[View], pose: RigidTransform) -> RigidTransform:
    """World->agent transform of the view-0 image-center agent."""
    g = views[0].geometry
    frame = agent_frame_for_pixel(g, volume, pose, center_pixel(g))
    return world_frame(frame, g)


def _perturb(pose: RigidTransform, frame: RigidTransform, delta6) -> RigidTransform:
    d = Se3Vector(np.asarray(delta6[:3], dtype=float), np.asarray(delta6[3:], dtype=float))
    return se3.compose(se3.inverse(frame), se3.compose(se3.se3_exp(d), se3.compose(frame, pose)))


def optimize_registration(
    volume: Volume3D,
    views: list[View],
    t_init: RigidTransform,
    budget: int,
    seed: int = 0,
    sigma_start: tuple = (5.0, 5.0 * DEG),
    sigma_end: tuple = (0.5, 0.5 * DEG),
    step_mm: float | None = None,
    trace_path=None,
) -> RigidTransform:
    """Elitist annealed Gaussian search maximizing summed GC.

    sigma anneals geometrically from ``sigma_start`` to ``sigma_end`` over
    the evaluation budget; deterministic for a fixed seed.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1 evaluation")
    rng = np.random.default_rng(seed)
    frame = center_agent_frame(volume, views, t_init)
    incumbent = t_init
    best = summed_gc(volume, views, incumbent, step_mm)
    trace = [{"eval_index": 0, "pose": incumbent.to_json(), "gc_value": best}]
    for i in range(budget):
        frac = i / max(budget - 1, 1)
        sig_t = sigma_start[0] * (sigma_end[0] / sigma_start[0]) ** frac
        sig_r = sigma_start[1] * (sigma_end[1] / sigma_start[1]) ** frac
        delta = np.concatenate([rng.normal(0.0, sig_t, 3), rng.normal(0.0, sig_r, 3)])
        candidate = _perturb(incumbent, frame, delta)
        value = summed_gc(volume, views, candidate, step_mm)
        if value > best:
            best = value
            incumbent = candidate
        trace.append({"eval_index": i + 1, "pose": candidate.to_json(), "gc_value": value})
    if trace_path is not None:
        with open(trace_path, "w") as f:
            for rec in trace:
                f.write(json.dumps(rec) + "\n")
    return incumbent


def refine_local(
    volume: Volume3D,
    views: list[View],
    t: RigidTransform,
    bound_mm: float = 5.0,
    bound_deg: float = 5.0,
    step_mm: float | None = None,
) -> RigidTransform:
    """Derivative-free local GC maximization around ``t``.

    Coordinate descent over the six image-center agent-frame parameters with
    a trust region starting at 2 mm / 2 deg, halved after every sweep without
    improvement, four shrinks total. Moves are clamped to +-bound. The
    returned pose never scores below the input.
    """
    frame = center_agent_frame(volume, views, t)
    best_pose = t
    best = summed_gc(volume, views, t, step_mm)
    offsets = np.zeros(6)
    radius_t, radius_r = 2.0, 2.0 * DEG
    bounds = np.array([bound_mm] * 3 + [bound_deg * DEG] * 3)
    for _ in range(5):  # initial radius + 4 shrinks
        improved = True
        while improved:
            improved = False
            for axis in range(6):
                step = radius_t if axis < 3 else radius_r
                for sign in (+1.0, -1.0):
                    trial = offsets.copy()
                    trial[axis] = np.clip(trial[axis] + sign * step, -bounds[axis], bounds[axis])
                    if trial[axis] == offsets[axis]:
                        continue
                    candidate = _perturb(t, frame, trial)
                    value = summed_gc(volume, views, candidate, step_mm)
                    if value > best:
                        best = value
                        best_pose = candidate
                        offsets = trial
                        improved = True
        radius_t *= 0.5
        radius_r *= 0.5
    return best_pose
