"""Procedural spine-like phantoms: stacked vertebra primitives with landmarks,
trilinear sampling and rod-shaped device occluders.

Volume layout: ``data`` is a dense (nz, ny, nx) float array indexed
``data[iz, iy, ix]``; voxel (ix, iy, iz) has its center at
``origin + (ix, iy, iz) * spacing`` in volume millimetre coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Volume3D:
    dims: tuple  # (nx, ny, nz) voxels
    spacing: np.ndarray  # mm per voxel, (3,)
    origin: np.ndarray  # mm position of voxel (0,0,0) center, (3,)
    data: np.ndarray  # (nz, ny, nx)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError("dims must be three positive integers")
        spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise ValueError("spacing components must be positive")
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValueError("data length must equal the product of dims")
        data = data.reshape(dims[2], dims[1], dims[0])
        if not np.all(np.isfinite(data)):
            raise ValueError("intensities must be finite")
        if np.any(data < 0):
            raise ValueError("intensities must be non-negative")
        data.flags.writeable = False
        spacing.flags.writeable = False
        origin.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @property
    def center(self) -> np.ndarray:
        """Center of the voxel grid in volume coordinates (mm)."""
        return self.origin + (np.asarray(self.dims, dtype=float) - 1.0) / 2.0 * self.spacing

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box enclosing all voxel cells (half-voxel margin)."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.asarray(self.dims, dtype=float) - 0.5) * self.spacing
        return lo, hi


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (7, 3) mm, volume coordinates

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(7, 3)
        if len({tuple(row) for row in np.round(p, 9)}) != 7:
            raise ValueError("landmarks must be 7 distinct points")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class PhantomParams:
    vertebra_count: int = 7
    vertebra_size: tuple = (30.0, 11.0, 24.0)  # body extents (x, y, z) mm
    gap: float = 2.5  # mm between adjacent bodies
    body_intensity: float = 1.0
    process_intensity: float = 1.3
    background_intensity: float = 0.05
    noise_sigma: float = 0.02
    # per-vertebra variability: adjacent bodies stay alike but not identical,
    # and a monotonic caudal-to-cranial gradient keeps the stack globally
    # unambiguous under translations along it
    size_gradient: float = 0.18
    intensity_gradient: float = 0.25
    size_jitter: float = 0.07
    intensity_jitter: float = 0.12
    seed: int = 0
    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.vertebra_count < 3:
            raise ValueError("vertebra_count must be at least 3")
        for name in ("body_intensity", "process_intensity", "background_intensity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _rounded_box_mask(px, py, pz, center, half, radius):
    """Signed-distance test for a box with rounded edges, vectorized."""
    qx = np.abs(px - center[0]) - (half[0] - radius)
    qy = np.abs(py - center[1]) - (half[1] - radius)
    qz = np.abs(pz - center[2]) - (half[2] - radius)
    ox = np.maximum(qx, 0.0)
    oy = np.maximum(qy, 0.0)
    oz = np.maximum(qz, 0.0)
    outside = np.sqrt(ox * ox + oy * oy + oz * oz)
    inside = np.minimum(np.maximum(qx, np.maximum(qy, qz)), 0.0)
    return outside + inside - radius < 0.0


def _ellipsoid_mask(px, py, pz, center, radii):
    dx = (px - center[0]) / radii[0]
    dy = (py - center[1]) / radii[1]
    dz = (pz - center[2]) / radii[2]
    return dx * dx + dy * dy + dz * dz < 1.0


def body_centers(p: PhantomParams) -> np.ndarray:
    """Vertebral body centers along the y axis, centered in the volume."""
    dims = np.asarray(p.dims, dtype=float)
    spacing = np.asarray(p.spacing, dtype=float)
    origin = -(dims - 1.0) / 2.0 * spacing
    vol_center = origin + (dims - 1.0) / 2.0 * spacing  # zero by construction
    pitch = p.vertebra_size[1] + p.gap
    n = p.vertebra_count
    ys = (np.arange(n) - (n - 1) / 2.0) * pitch
    centers = np.zeros((n, 3))
    centers[:, 0] = vol_center[0]
    centers[:, 1] = vol_center[1] + ys
    centers[:, 2] = vol_center[2]
    return centers


def generate_phantom(p: PhantomParams) -> tuple[Volume3D, LandmarkSet]:
    """Deterministic stack of rounded-box bodies with posterior processes.

    Landmarks sit at seven body centers; for other vertebra counts seven
    evenly index-spaced positions are interpolated between adjacent centers.
    """
    dims = tuple(int(d) for d in p.dims)
    spacing = np.asarray(p.spacing, dtype=float)
    origin = -(np.asarray(dims, dtype=float) - 1.0) / 2.0 * spacing

    half = np.asarray(p.vertebra_size, dtype=float) / 2.0
    centers = body_centers(p)
    extent_lo = centers[0, 1] - half[1]
    extent_hi = centers[-1, 1] + half[1]
    lo = origin - 0.5 * spacing
    hi = origin + (np.asarray(dims, dtype=float) - 0.5) * spacing
    # the posterior process extends in +z; bound-check at the largest jitter
    max_scale = 1.06 * (1.0 + p.size_jitter)
    process_r = np.array([half[0] * 0.45, half[1] * 0.7, half[2] * 0.9])
    if (
        extent_lo < lo[1]
        or extent_hi > hi[1]
        or centers[0, 2] + 1.8 * half[2] * max_scale > hi[2]
        or abs(centers[0, 0]) + half[0] * max_scale > hi[0]
    ):
        raise ValueError("vertebra geometry exceeds volume bounds")

    ix = origin[0] + np.arange(dims[0]) * spacing[0]
    iy = origin[1] + np.arange(dims[1]) * spacing[1]
    iz = origin[2] + np.arange(dims[2]) * spacing[2]
    pz, py, px = np.meshgrid(iz, iy, ix, indexing="ij")

    rng = np.random.default_rng(p.seed)
    n = p.vertebra_count
    # mild caudal-to-cranial size gradient plus per-body jitter
    gradient = 1.0 + 0.06 * (np.arange(n) - (n - 1) / 2.0) / max((n - 1) / 2.0, 1.0)
    size_scale = gradient * (1.0 + p.size_jitter * rng.uniform(-1.0, 1.0, size=n))
    body_gain = 1.0 + p.intensity_jitter * rng.uniform(-1.0, 1.0, size=n)

    data = np.full((dims[2], dims[1], dims[0]), float(p.background_intensity))
    for i, c in enumerate(centers):
        half_i = half * np.array([size_scale[i], 1.0, size_scale[i]])
        rounding = 0.2 * float(np.min(half_i))
        body = _rounded_box_mask(px, py, pz, c, half_i, rounding)
        data[body] = np.maximum(data[body], p.body_intensity * body_gain[i])
        proc_r_i = process_r * size_scale[i]
        proc_center = np.array([c[0], c[1], c[2] + half_i[2] * 0.9])
        proc = _ellipsoid_mask(px, py, pz, proc_center, proc_r_i)
        data[proc] = np.maximum(data[proc], p.process_intensity * body_gain[i])

    if p.noise_sigma > 0:
        data = data + rng.normal(0.0, p.noise_sigma, size=data.shape)
    data = np.maximum(data, 0.0)

    volume = Volume3D(dims=dims, spacing=spacing, origin=origin, data=data)
    landmarks = LandmarkSet(_landmark_points(centers))
    return volume, landmarks


def _landmark_points(centers: np.ndarray) -> np.ndarray:
    n = len(centers)
    if n == 7:
        return centers.copy()
    pts = np.zeros((7, 3))
    for j in range(7):
        x = j * (n - 1) / 6.0
        i0 = min(int(np.floor(x)), n - 2)
        frac = x - i0
        pts[j] = (1.0 - frac) * centers[i0] + frac * centers[i0 + 1]
    return pts


def sample_trilinear(v: Volume3D, point) -> float:
    """Trilinear interpolation at a millimetre point; outside the volume -> 0."""
    point = np.asarray(point, dtype=float).reshape(3)
    if not np.all(np.isfinite(point)):
        raise ValueError("sample point must be finite")
    return float(sample_trilinear_many(v, point[None, :])[0])


def sample_trilinear_many(v: Volume3D, points: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sampling of (N, 3) millimetre points."""
    f = (np.asarray(points, dtype=float) - v.origin) / v.spacing
    i0 = np.floor(f).astype(np.int64)
    frac = f - i0
    nx, ny, nz = v.dims
    out = np.zeros(len(f))
    data = v.data
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                xi = i0[:, 0] + dx
                yi = i0[:, 1] + dy
                zi = i0[:, 2] + dz
                ok = (
                    (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny) & (zi >= 0) & (zi < nz)
                )
                w = (
                    (frac[:, 0] if dx else 1.0 - frac[:, 0])
                    * (frac[:, 1] if dy else 1.0 - frac[:, 1])
                    * (frac[:, 2] if dz else 1.0 - frac[:, 2])
                )
                if np.any(ok):
                    out[ok] += w[ok] * data[zi[ok], yi[ok], xi[ok]]
    return out


def insert_rod(v: Volume3D, start, end, radius: float, intensity: float) -> Volume3D:
    """New volume with voxels within ``radius`` of the segment raised to
    ``max(existing, intensity)``."""
    start = np.asarray(start, dtype=float).reshape(3)
    end = np.asarray(end, dtype=float).reshape(3)
    if radius <= 0:
        raise ValueError("radius must be positive")
    seg = end - start
    seg_len2 = float(seg @ seg)
    if seg_len2 == 0.0:
        raise ValueError("degenerate rod segment")

    lo_mm = np.minimum(start, end) - radius
    hi_mm = np.maximum(start, end) + radius
    lo_idx = np.maximum(np.floor((lo_mm - v.origin) / v.spacing).astype(int), 0)
    hi_idx = np.minimum(
        np.ceil((hi_mm - v.origin) / v.spacing).astype(int),
        np.asarray(v.dims) - 1,
    )
    if np.any(hi_idx < lo_idx):
        return v  # rod fully outside

    xs = v.origin[0] + np.arange(lo_idx[0], hi_idx[0] + 1) * v.spacing[0]
    ys = v.origin[1] + np.arange(lo_idx[1], hi_idx[1] + 1) * v.spacing[1]
    zs = v.origin[2] + np.arange(lo_idx[2], hi_idx[2] + 1) * v.spacing[2]
    pz, py, px = np.meshgrid(zs, ys, xs, indexing="ij")

    rx = px - start[0]
    ry = py - start[1]
    rz = pz - start[2]
    tproj = (rx * seg[0] + ry * seg[1] + rz * seg[2]) / seg_len2
    tproj = np.clip(tproj, 0.0, 1.0)
    dx = rx - tproj * seg[0]
    dy = ry - tproj * seg[1]
    dz = rz - tproj * seg[2]
    inside = dx * dx + dy * dy + dz * dz <= radius * radius

    data = np.array(v.data)
    sub = data[
        lo_idx[2] : hi_idx[2] + 1, lo_idx[1] : hi_idx[1] + 1, lo_idx[0] : hi_idx[0] + 1
    ]
    sub[inside] = np.maximum(sub[inside], intensity)
    return Volume3D(dims=v.dims, spacing=v.spacing, origin=v.origin, data=data)
