"""Cone-beam camera model, ray-cast projection rendering, agent coordinate
frames and ROI extraction.

Pixel convention: a pixel coordinate is ``(x, y)`` with ``x`` along
``axis_u`` (columns) and ``y`` along ``axis_v`` (rows); image data arrays are
indexed ``data[y, x]``. The image coordinate system of a view has its origin
at the center of pixel (0, 0), x/y axes along the detector axes and z along
``axis_u x axis_v`` (pointing from the source toward the detector).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .phantom import Volume3D
from .se3 import RigidTransform, compose, inverse

VARIANCE_FLOOR = 1e-6


class AgentOriginUndefined(ValueError):
    """The pixel's ray misses the transformed volume bounding box."""


@dataclass(frozen=True)
class CameraGeometry:
    source: np.ndarray  # X-ray point source, mm
    detector_origin: np.ndarray  # center of pixel (0, 0), mm
    axis_u: np.ndarray  # unit, pixel x direction
    axis_v: np.ndarray  # unit, pixel y direction
    pixel_spacing: np.ndarray  # (su, sv) mm
    image_dims: tuple  # (nx, ny)

    def __post_init__(self):
        source = np.asarray(self.source, dtype=float).reshape(3)
        det = np.asarray(self.detector_origin, dtype=float).reshape(3)
        u = np.asarray(self.axis_u, dtype=float).reshape(3)
        v = np.asarray(self.axis_v, dtype=float).reshape(3)
        sp = np.asarray(self.pixel_spacing, dtype=float).reshape(2)
        dims = tuple(int(d) for d in self.image_dims)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9 or abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("detector axes must be unit length")
        if abs(float(u @ v)) > 1e-9:
            raise ValueError("detector axes must be orthogonal")
        if len(dims) != 2 or any(d <= 0 for d in dims):
            raise ValueError("image_dims must be two positive integers")
        if np.any(sp <= 0):
            raise ValueError("pixel spacing must be positive")
        n = np.cross(u, v)
        if abs(float((source - det) @ n)) < 1e-9:
            raise ValueError("source must not lie on the detector plane")
        for name, val in (("source", source), ("detector_origin", det), ("axis_u", u),
                          ("axis_v", v), ("pixel_spacing", sp)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)
        object.__setattr__(self, "image_dims", dims)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def to_json(self) -> dict:
        return {
            "source": list(map(float, self.source)),
            "detector_origin": list(map(float, self.detector_origin)),
            "axis_u": list(map(float, self.axis_u)),
            "axis_v": list(map(float, self.axis_v)),
            "pixel_spacing": list(map(float, self.pixel_spacing)),
            "image_dims": list(self.image_dims),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraGeometry":
        return cls(
            source=d["source"],
            detector_origin=d["detector_origin"],
            axis_u=d["axis_u"],
            axis_v=d["axis_v"],
            pixel_spacing=d["pixel_spacing"],
            image_dims=tuple(d["image_dims"]),
        )


@dataclass(frozen=True)
class Image2D:
    dims: tuple  # (nx, ny)
    pixel_spacing: np.ndarray  # (su, sv) mm
    data: np.ndarray  # (ny, nx)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        sp = np.asarray(self.pixel_spacing, dtype=float).reshape(2)
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != dims[0] * dims[1]:
            raise ValueError("data length must equal the product of dims")
        data = data.reshape(dims[1], dims[0])
        if not np.all(np.isfinite(data)):
            raise ValueError("image values must be finite")
        data.flags.writeable = False
        sp.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "pixel_spacing", sp)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class AgentFrame:
    """Image-axis-aligned frame with origin traced into the volume.

    ``e`` maps image coordinates to agent coordinates (a pure translation);
    ``origin_3d`` is the traced point in world millimetres.
    """

    e: RigidTransform
    origin_3d: np.ndarray

    def __post_init__(self):
        if np.max(np.abs(self.e.rotation - np.eye(3))) > 1e-9:
            raise ValueError("agent frame rotation must be identity")
        o = np.asarray(self.origin_3d, dtype=float).reshape(3)
        o.flags.writeable = False
        object.__setattr__(self, "origin_3d", o)


def image_from_world(g: CameraGeometry) -> RigidTransform:
    """World coordinates -> the view's image coordinate system."""
    r = np.stack([g.axis_u, g.axis_v, g.normal])  # rows
    return RigidTransform.from_rotation_translation(r, -r @ g.detector_origin)


def world_from_image(g: CameraGeometry) -> RigidTransform:
    return inverse(image_from_world(g))


def world_frame(frame: AgentFrame, g: CameraGeometry) -> RigidTransform:
    """Full world -> agent coordinate transform for action application."""
    return compose(frame.e, image_from_world(g))


def ray_for_pixel(g: CameraGeometry, px) -> tuple[np.ndarray, np.ndarray]:
    """Source point and unit direction toward the detector point of ``px``."""
    px = np.asarray(px, dtype=float).reshape(2)
    target = (
        g.detector_origin
        + px[0] * g.pixel_spacing[0] * g.axis_u
        + px[1] * g.pixel_spacing[1] * g.axis_v
    )
    d = target - g.source
    return g.source.copy(), d / np.linalg.norm(d)


def project_point(g: CameraGeometry, point) -> np.ndarray:
    """Perspective projection of a world point onto (x, y) pixel coordinates."""
    p = np.asarray(point, dtype=float).reshape(3)
    n = g.normal
    denom = float(n @ (p - g.source))
    if abs(denom) < 1e-12:
        raise ValueError("point projects to infinity")
    t = float(n @ (g.detector_origin - g.source)) / denom
    hit = g.source + t * (p - g.source)
    rel = hit - g.detector_origin
    return np.array(
        [float(rel @ g.axis_u) / g.pixel_spacing[0], float(rel @ g.axis_v) / g.pixel_spacing[1]]
    )


def transformed_bounds(v: Volume3D, t: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """World axis-aligned bounding box of the transformed volume."""
    lo, hi = v.bounds()
    corners = np.array(
        [[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]
    )
    world = t.apply(corners)
    return world.min(axis=0), world.max(axis=0)


@njit(cache=True)
def _ray_box(sx, sy, sz, dx, dy, dz, lo, hi):
    t0 = -1e30
    t1 = 1e30
    origin = (sx, sy, sz)
    direction = (dx, dy, dz)
    for a in range(3):
        d = direction[a]
        if abs(d) < 1e-12:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - origin[a]) / d
            tb = (hi[a] - origin[a]) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _trilinear(data, ox, oy, oz, sx, sy, sz, px, py, pz):
    fx = (px - ox) / sx
    fy = (py - oy) / sy
    fz = (pz - oz) / sz
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    iz = int(np.floor(fz))
    wx = fx - ix
    wy = fy - iy
    wz = fz - iz
    nz, ny, nx = data.shape
    acc = 0.0
    for dz in range(2):
        zi = iz + dz
        if zi < 0 or zi >= nz:
            continue
        wzz = wz if dz else 1.0 - wz
        for dy in range(2):
            yi = iy + dy
            if yi < 0 or yi >= ny:
                continue
            wyy = wy if dy else 1.0 - wy
            for dx in range(2):
                xi = ix + dx
                if xi < 0 or xi >= nx:
                    continue
                wxx = wx if dx else 1.0 - wx
                acc += wzz * wyy * wxx * data[zi, yi, xi]
    return acc


@njit(parallel=True, cache=True)
def _raycast_kernel(
    data, vol_origin, vol_spacing, inv_r, inv_t,
    source, det_origin, axis_u, axis_v, su, sv,
    nx_img, ny_img, step, box_lo, box_hi, out,
):
    for y in prange(ny_img):
        for x in range(nx_img):
            tx = det_origin[0] + x * su * axis_u[0] + y * sv * axis_v[0]
            ty = det_origin[1] + x * su * axis_u[1] + y * sv * axis_v[1]
            tz = det_origin[2] + x * su * axis_u[2] + y * sv * axis_v[2]
            dx = tx - source[0]
            dy = ty - source[1]
            dz = tz - source[2]
            norm = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            t0, t1 = _ray_box(source[0], source[1], source[2], dx, dy, dz, box_lo, box_hi)
            if t0 < 0.0:
                t0 = 0.0
            if t1 <= t0:
                out[y, x] = 0.0
                continue
            n = int((t1 - t0) / step) + 1
            acc = 0.0
            for k in range(n):
                tc = t0 + (k + 0.5) * step
                if tc > t1:
                    break
                wx = source[0] + tc * dx
                wy = source[1] + tc * dy
                wz = source[2] + tc * dz
                # world -> volume coordinates
                px = inv_r[0, 0] * wx + inv_r[0, 1] * wy + inv_r[0, 2] * wz + inv_t[0]
                py = inv_r[1, 0] * wx + inv_r[1, 1] * wy + inv_r[1, 2] * wz + inv_t[1]
                pz = inv_r[2, 0] * wx + inv_r[2, 1] * wy + inv_r[2, 2] * wz + inv_t[2]
                acc += _trilinear(
                    data, vol_origin[0], vol_origin[1], vol_origin[2],
                    vol_spacing[0], vol_spacing[1], vol_spacing[2], px, py, pz,
                )
            out[y, x] = acc * step


def default_step_mm(v: Volume3D) -> float:
    """Half the smallest voxel spacing."""
    return float(np.min(v.spacing)) / 2.0


def render_drr(v: Volume3D, t: RigidTransform, g: CameraGeometry, step_mm: float | None = None) -> Image2D:
    """Line-integral projection of the transformed volume (ray casting).

    Each pixel integrates the volume along its ray, uniformly sampled at
    ``step_mm`` within the transformed volume's bounding box and scaled by
    ``step_mm``. Per-pixel work is independent, so the output is identical
    for any number of threads.
    """
    if step_mm is None:
        step_mm = default_step_mm(v)
    if step_mm <= 0:
        raise ValueError("step_mm must be positive")
    if not np.all(np.isfinite(t.matrix)):
        raise ValueError("non-finite transform")
    inv = inverse(t)
    box_lo, box_hi = transformed_bounds(v, t)
    nx, ny = g.image_dims
    out = np.zeros((ny, nx))
    _raycast_kernel(
        v.data, v.origin, v.spacing, inv.rotation.copy(), inv.translation.copy(),
        g.source, g.detector_origin, g.axis_u, g.axis_v,
        float(g.pixel_spacing[0]), float(g.pixel_spacing[1]),
        nx, ny, float(step_mm), box_lo, box_hi, out,
    )
    return Image2D(dims=g.image_dims, pixel_spacing=g.pixel_spacing, data=out)


def ray_box_span(g: CameraGeometry, v: Volume3D, t: RigidTransform, px) -> tuple[float, float]:
    src, d = ray_for_pixel(g, px)
    lo, hi = transformed_bounds(v, t)
    t0, t1 = _ray_box(src[0], src[1], src[2], d[0], d[1], d[2], lo, hi)
    return float(t0), float(t1)


def agent_frame_for_pixel(g: CameraGeometry, v: Volume3D, t: RigidTransform, px) -> AgentFrame:
    """Agent frame whose origin is the pixel's ray traced to the mid-point of
    its traversal of the transformed volume's bounding box."""
    src, d = ray_for_pixel(g, px)
    t0, t1 = ray_box_span(g, v, t, px)
    if t1 <= max(t0, 0.0):
        raise AgentOriginUndefined(f"ray for pixel {tuple(px)} misses the volume")
    origin = src + 0.5 * (t0 + t1) * d
    c_img = image_from_world(g).apply(origin)
    e = RigidTransform.from_translation(-c_img)
    return AgentFrame(e=e, origin_3d=origin)


def agent_origin_grid(
    g: CameraGeometry, v: Volume3D, t: RigidTransform, pixels_x: np.ndarray, pixels_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized traced origins for a pixel grid.

    Returns (origins (ny, nx, 3) world mm, valid (ny, nx) bool). Invalid
    entries (ray misses the volume box) hold NaN origins.
    """
    lo, hi = transformed_bounds(v, t)
    gx, gy = np.meshgrid(pixels_x, pixels_y)
    targets = (
        g.detector_origin[None, None, :]
        + gx[..., None] * g.pixel_spacing[0] * g.axis_u[None, None, :]
        + gy[..., None] * g.pixel_spacing[1] * g.axis_v[None, None, :]
    )
    d = targets - g.source
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    t0 = np.full(gx.shape, -1e30)
    t1 = np.full(gx.shape, 1e30)
    for a in range(3):
        da = d[..., a]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[a] - g.source[a]) / da
            tb = (hi[a] - g.source[a]) / da
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        parallel = np.abs(da) < 1e-12
        inside = (g.source[a] >= lo[a]) & (g.source[a] <= hi[a])
        near = np.where(parallel, np.where(inside, -1e30, 1e30), near)
        far = np.where(parallel, np.where(inside, 1e30, -1e30), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    t0 = np.maximum(t0, 0.0)
    valid = t1 > t0
    mid = 0.5 * (t0 + t1)
    origins = g.source[None, None, :] + mid[..., None] * d
    origins[~valid] = np.nan
    return origins, valid


def extract_roi(
    img: Image2D, center_px, roi_dims, roi_spacing, normalize: bool = True
) -> Image2D:
    """Bilinear resample of a region centered on ``center_px``.

    Samples outside the image are 0. With ``normalize`` the output is scaled
    to zero mean and unit variance; images with variance below the floor map
    to all zeros.
    """
    roi_dims = tuple(int(d) for d in roi_dims)
    if roi_dims[0] % 2 == 0 or roi_dims[1] % 2 == 0:
        raise ValueError("roi_dims must be odd")
    center_px = np.asarray(center_px, dtype=float).reshape(2)
    roi_spacing = np.asarray(roi_spacing, dtype=float).reshape(2)

    offs_x = (np.arange(roi_dims[0]) - (roi_dims[0] - 1) / 2.0) * roi_spacing[0]
    offs_y = (np.arange(roi_dims[1]) - (roi_dims[1] - 1) / 2.0) * roi_spacing[1]
    # positions in source pixel units
    sx = center_px[0] + offs_x / img.pixel_spacing[0]
    sy = center_px[1] + offs_y / img.pixel_spacing[1]
    gx, gy = np.meshgrid(sx, sy)
    out = bilinear_sample(img.data, gx, gy)
    if normalize:
        out = normalize_intensities(out)
    return Image2D(dims=roi_dims, pixel_spacing=roi_spacing, data=out)


def bilinear_sample(data: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation on pixel coordinates; outside the grid -> 0."""
    ny, nx = data.shape
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    out = np.zeros_like(gx, dtype=float)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny)
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            if np.any(ok):
                out[ok] += w[ok] * data[yi[ok], xi[ok]]
    return out


def normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance scaling with a variance floor."""
    var = float(np.var(data))
    if var < VARIANCE_FLOOR:
        return np.zeros_like(data)
    return (data - float(np.mean(data))) / np.sqrt(var)


def normalized_image(img: Image2D) -> Image2D:
    """Whole-image normalization used as the network input conditioning."""
    return Image2D(dims=img.dims, pixel_spacing=img.pixel_spacing,
                   data=normalize_intensities(img.data))


def biplane_geometries(
    source_to_detector: float = 1000.0,
    source_to_center: float = 600.0,
    image_dims: tuple = (128, 128),
    pixel_spacing: tuple = (1.5, 1.5),
    separation_deg: float = 90.0,
    n_views: int = 2,
) -> list[CameraGeometry]:
    """Desk-scale view set: view 0 looks along +z, later views rotate about y.

    The volume is assumed centered at the world origin; the source sits
    ``source_to_center`` away and the detector plane ``source_to_detector``
    from the source.
    """
    views = []
    for k in range(n_views):
        ang = np.radians(separation_deg * k)
        c, s = np.cos(ang), np.sin(ang)
        r = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        source = r @ np.array([0.0, 0.0, -source_to_center])
        det_center = r @ np.array([0.0, 0.0, source_to_detector - source_to_center])
        axis_u = r @ np.array([1.0, 0.0, 0.0])
        axis_v = np.array([0.0, 1.0, 0.0])
        nx, ny = image_dims
        det_origin = (
            det_center
            - (nx - 1) / 2.0 * pixel_spacing[0] * axis_u
            - (ny - 1) / 2.0 * pixel_spacing[1] * axis_v
        )
        views.append(
            CameraGeometry(
                source=source,
                detector_origin=det_origin,
                axis_u=axis_u,
                axis_v=axis_v,
                pixel_spacing=np.asarray(pixel_spacing, dtype=float),
                image_dims=image_dims,
            )
        )
    return views


def magnification_at_depth(g: CameraGeometry, depth_mm: float) -> float:
    """Source-to-detector distance over source-to-plane depth."""
    sdd = abs(float((g.detector_origin - g.source) @ g.normal))
    return sdd / depth_mm


def center_pixel(g: CameraGeometry) -> np.ndarray:
    return (np.asarray(g.image_dims, dtype=float) - 1.0) / 2.0
