"""Rigid-transform (SE(3)) arithmetic: generators, exp/log maps, geodesic
distance and the L2 chordal mean.

Conventions used throughout the package:

* a rigid transform is a 4x4 homogeneous matrix, rotation block ``R`` and
  translation column ``t``, bottom row (0, 0, 0, 1);
* a tangent vector has six coefficients ``(t, w)``: three translation
  coefficients in millimetres followed by three rotation coefficients in
  radians, matching the generator order (x, y, z translations, then x, y, z
  rotations);
* the geodesic distance mixes units: rotation coefficients are rescaled to
  degrees and weighted by sqrt(2), so a 1 mm translation step and a
  1 degree rotation step have comparable magnitude (1.0 vs ~1.414).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Angle threshold below which series expansions replace the closed forms.
_SMALL_ANGLE = 1e-6
# Rotation angles within this margin of pi are rejected by the logarithm.
_BRANCH_MARGIN = 1e-6

ROTATION_DEGREE_WEIGHT = math.sqrt(2.0)
RAD_TO_DEG = 180.0 / math.pi


class BranchCutError(ValueError):
    """Raised when a rotation angle is too close to pi for a stable log."""


@dataclass(frozen=True)
class Se3Vector:
    """Tangent-space element: translation (mm) and rotation (rad) coefficients."""

    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        w = np.asarray(self.w, dtype=float).reshape(3)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(w))):
            raise ValueError("tangent vector must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "w", w)

    def as_array(self) -> np.ndarray:
        """Six coefficients [t1, t2, t3, w1, w2, w3]."""
        return np.concatenate([self.t, self.w])

    @classmethod
    def from_array(cls, a) -> "Se3Vector":
        a = np.asarray(a, dtype=float).reshape(6)
        return cls(a[:3], a[3:])

    def to_json(self) -> list:
        return [float(x) for x in self.as_array()]


@dataclass(frozen=True)
class RigidTransform:
    """4x4 homogeneous rigid transform with validated rotation block."""

    matrix: np.ndarray

    _ORTHO_TOL = 1e-9

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float).reshape(4, 4)
        if not np.all(np.isfinite(m)):
            raise ValueError("transform must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > self._ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > self._ORTHO_TOL:
            raise ValueError("rotation block must have determinant +1")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rotation_translation(cls, r, t) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = np.asarray(t, dtype=float).reshape(3)
        return cls(m)

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls.from_rotation_translation(np.eye(3), t)

    def apply(self, points) -> np.ndarray:
        """Map one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def to_json(self) -> list:
        """Row-major 16-element list."""
        return [float(x) for x in self.matrix.reshape(16)]

    @classmethod
    def from_json(cls, values) -> "RigidTransform":
        return cls(np.asarray(values, dtype=float).reshape(4, 4))


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def generators() -> list[np.ndarray]:
    """The six 4x4 tangent-space generators: translations x/y/z, rotations x/y/z."""
    gens = []
    for axis in range(3):
        g = np.zeros((4, 4))
        g[axis, 3] = 1.0
        gens.append(g)
    for axis in range(3):
        g = np.zeros((4, 4))
        e = np.zeros(3)
        e[axis] = 1.0
        g[:3, :3] = skew(e)
        gens.append(g)
    return gens


def tangent_matrix(d: Se3Vector) -> np.ndarray:
    """Linear combination of the generators for the given coefficients."""
    m = np.zeros((4, 4))
    m[:3, :3] = skew(d.w)
    m[:3, 3] = d.t
    return m


def so3_exp(w) -> np.ndarray:
    """Rodrigues rotation for a rotation vector (radians)."""
    w = np.asarray(w, dtype=float).reshape(3)
    angle = float(np.linalg.norm(w))
    k = skew(w)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        # sin(a)/a and (1-cos(a))/a^2 Taylor series
        a = 1.0 - angle**2 / 6.0
        b = 0.5 - angle**2 / 24.0
    else:
        a = math.sin(angle) / angle
        b = (1.0 - math.cos(angle)) / angle**2
    return np.eye(3) + a * k + b * k2


def so3_log(r) -> np.ndarray:
    """Rotation vector of a rotation matrix; rejects angles at/near pi."""
    r = np.asarray(r, dtype=float)
    cos_angle = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    if angle >= math.pi - _BRANCH_MARGIN:
        raise BranchCutError(f"rotation angle {angle:.9f} too close to pi")
    axis_part = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < _SMALL_ANGLE:
        return 0.5 * (1.0 + angle**2 / 6.0) * axis_part
    return (angle / (2.0 * math.sin(angle))) * axis_part


def _translation_jacobian(w) -> np.ndarray:
    """V(w) such that exp translation = V(w) @ t."""
    w = np.asarray(w, dtype=float).reshape(3)
    angle = float(np.linalg.norm(w))
    k = skew(w)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        b = 0.5 - angle**2 / 24.0
        c = 1.0 / 6.0 - angle**2 / 120.0
    else:
        b = (1.0 - math.cos(angle)) / angle**2
        c = (angle - math.sin(angle)) / angle**3
    return np.eye(3) + b * k + c * k2


def _translation_jacobian_inv(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    angle = float(np.linalg.norm(w))
    k = skew(w)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        c = 1.0 / 12.0 + angle**2 / 720.0
    else:
        c = (1.0 - 0.5 * angle * math.sin(angle) / (1.0 - math.cos(angle))) / angle**2
    return np.eye(3) - 0.5 * k + c * k2


def se3_exp(d: Se3Vector) -> RigidTransform:
    """Closed-form exponential of a tangent vector."""
    if float(np.linalg.norm(d.w)) >= math.pi:
        raise ValueError("rotation coefficients outside the principal branch")
    r = so3_exp(d.w)
    t = _translation_jacobian(d.w) @ d.t
    return RigidTransform.from_rotation_translation(r, t)


def se3_log(t: RigidTransform) -> Se3Vector:
    """Closed-form logarithm; rejects rotation angle within 1e-6 of pi."""
    w = so3_log(t.rotation)
    u = _translation_jacobian_inv(w) @ t.translation
    return Se3Vector(u, w)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    m = a.matrix @ b.matrix
    # Orthonormality drift from long products stays well under the strict
    # constructor tolerance; renormalize() exists for explicit cleanup.
    return RigidTransform(_snap(m))


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform.from_rotation_translation(rt, -rt @ t.translation)


def renormalize(t: RigidTransform) -> RigidTransform:
    """Project the rotation block back onto SO(3) (SVD with sign correction)."""
    u, _, vt = np.linalg.svd(t.rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        r = u @ vt
    return RigidTransform.from_rotation_translation(r, t.translation)


def _snap(m: np.ndarray) -> np.ndarray:
    m[3, :] = (0.0, 0.0, 0.0, 1.0)
    return m


def geodesic_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Mixed-unit distance: sqrt(2*|rotation in degrees|^2 + |translation mm|^2).

    Computed from the logarithm of ``b o a^-1``; symmetric in its arguments.
    """
    d = se3_log(compose(b, inverse(a)))
    return tangent_norm(d.as_array())


def tangent_norm(coeffs) -> float:
    """The distance norm applied directly to six tangent coefficients."""
    c = np.asarray(coeffs, dtype=float).reshape(6)
    rot_deg = c[3:] * RAD_TO_DEG
    return float(math.sqrt(2.0 * float(rot_deg @ rot_deg) + float(c[:3] @ c[:3])))


def chordal_mean(transforms: list[RigidTransform]) -> RigidTransform:
    """Minimizer of sum ||T_i - T||_F^2 over rigid transforms.

    Translation: arithmetic mean. Rotation: SVD projection of the mean
    rotation block onto SO(3) with determinant sign correction.
    """
    if not transforms:
        raise ValueError("chordal mean of an empty list")
    t_mean = np.mean([t.translation for t in transforms], axis=0)
    r_mean = np.mean([t.rotation for t in transforms], axis=0)
    u, s, vt = np.linalg.svd(r_mean)
    if np.max(s) < 1e-12:
        raise ValueError("degenerate mean rotation matrix")
    d = np.sign(np.linalg.det(u @ vt))
    if d < 0:
        u = u.copy()
        u[:, -1] *= -1.0
    return RigidTransform.from_rotation_translation(u @ vt, t_mean)


def rotation_about_axis(axis, angle_rad: float) -> RigidTransform:
    """Rotation about an axis through the origin."""
    axis = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    return RigidTransform.from_rotation_translation(so3_exp(axis / n * angle_rad), np.zeros(3))


def rotation_about_point(axis, angle_rad: float, point) -> RigidTransform:
    """Rotation about an axis through an arbitrary point."""
    rot = rotation_about_axis(axis, angle_rad)
    p = np.asarray(point, dtype=float).reshape(3)
    t = p - rot.rotation @ p
    return RigidTransform.from_rotation_translation(rot.rotation, t)


# ---------------------------------------------------------------------------
# Batched helpers used by the dense reward-map machinery. These operate on
# plain arrays so the per-pixel loops stay vectorized.
# ---------------------------------------------------------------------------


def batch_tangent_norm(t_mm: np.ndarray, w_rad: np.ndarray) -> np.ndarray:
    """Vectorized distance norm. ``t_mm`` is (..., 3); ``w_rad`` broadcasts."""
    rot_deg = np.asarray(w_rad) * RAD_TO_DEG
    rot_sq = np.sum(rot_deg * rot_deg, axis=-1)
    trans_sq = np.sum(t_mm * t_mm, axis=-1)
    return np.sqrt(2.0 * rot_sq + trans_sq)
