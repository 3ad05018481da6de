"""File formats: volumes (raw float32 + JSON sidecar), images (raw float32 or
16-bit PGM with an affine intensity mapping), landmarks, camera geometry,
reward maps and trajectories."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mdp import ACTIONS, RewardMap
from .phantom import LandmarkSet, Volume3D
from .projection import CameraGeometry, Image2D

_ACTION_ORDER = [
    f"{'+' if a.sign > 0 else '-'}G{a.generator_index}" for a in ACTIONS
]


def save_volume(path_base, v: Volume3D) -> None:
    """``<base>.raw`` (little-endian float32, x fastest) + ``<base>.json``."""
    base = Path(path_base)
    np.ascontiguousarray(v.data, dtype="<f4").tofile(base.with_suffix(".raw"))
    sidecar = {
        "dims": list(v.dims),
        "spacing": list(map(float, v.spacing)),
        "origin": list(map(float, v.origin)),
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_volume(path_base) -> Volume3D:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    data = np.fromfile(base.with_suffix(".raw"), dtype="<f4").astype(float)
    return Volume3D(
        dims=tuple(sidecar["dims"]),
        spacing=sidecar["spacing"],
        origin=sidecar["origin"],
        data=data,
    )


def save_landmarks(path, landmarks: LandmarkSet) -> None:
    Path(path).write_text(
        json.dumps([[float(c) for c in p] for p in landmarks.points], indent=2)
    )


def load_landmarks(path) -> LandmarkSet:
    return LandmarkSet(np.asarray(json.loads(Path(path).read_text()), dtype=float))


def save_image_raw(path_base, img: Image2D) -> None:
    base = Path(path_base)
    np.ascontiguousarray(img.data, dtype="<f4").tofile(base.with_suffix(".raw"))
    sidecar = {
        "dims": list(img.dims),
        "pixel_spacing": list(map(float, img.pixel_spacing)),
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_image_raw(path_base) -> Image2D:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    data = np.fromfile(base.with_suffix(".raw"), dtype="<f4").astype(float)
    return Image2D(
        dims=tuple(sidecar["dims"]),
        pixel_spacing=sidecar["pixel_spacing"],
        data=data,
    )


def save_image_pgm(path_base, img: Image2D) -> None:
    """16-bit binary PGM; the affine map back to physical intensities is
    recorded in the sidecar as value = pgm * scale + offset."""
    base = Path(path_base)
    lo = float(img.data.min())
    hi = float(img.data.max())
    span = hi - lo
    if span <= 0:
        scale = 1.0
        pgm = np.zeros_like(img.data, dtype=">u2")
    else:
        scale = span / 65535.0
        pgm = np.round((img.data - lo) / scale).astype(">u2")
    nx, ny = img.dims
    header = f"P5\n{nx} {ny}\n65535\n".encode()
    base.with_suffix(".pgm").write_bytes(header + pgm.tobytes())
    sidecar = {
        "dims": list(img.dims),
        "pixel_spacing": list(map(float, img.pixel_spacing)),
        "intensity_scale": scale,
        "intensity_offset": lo,
    }
    base.with_suffix(".pgm.json").write_text(json.dumps(sidecar, indent=2))


def load_image_pgm(path_base) -> Image2D:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".pgm.json").read_text())
    raw = base.with_suffix(".pgm").read_bytes()
    # header: magic, dims line, maxval line
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    nx, ny = (int(x) for x in parts[1].split())
    pgm = np.frombuffer(parts[3], dtype=">u2", count=nx * ny).astype(float)
    data = pgm * sidecar["intensity_scale"] + sidecar["intensity_offset"]
    return Image2D(dims=(nx, ny), pixel_spacing=sidecar["pixel_spacing"], data=data)


def save_geometry(path, g: CameraGeometry) -> None:
    Path(path).write_text(json.dumps(g.to_json(), indent=2))


def load_geometry(path) -> CameraGeometry:
    return CameraGeometry.from_json(json.loads(Path(path).read_text()))


def save_reward_map(path_base, rm: RewardMap) -> None:
    """Raw float32 rewards plus a sidecar with dims, the action ordering and
    the validity mask packed as a hex bitset (row-major)."""
    base = Path(path_base)
    np.ascontiguousarray(rm.rewards, dtype="<f4").tofile(base.with_suffix(".raw"))
    bits = np.packbits(rm.valid.reshape(-1).astype(np.uint8))
    sidecar = {
        "dims": list(rm.dims),
        "n_actions": rm.rewards.shape[2],
        "action_order": _ACTION_ORDER,
        "valid_bitset_hex": bits.tobytes().hex(),
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_reward_map(path_base) -> RewardMap:
    base = Path(path_base)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    nx, ny = sidecar["dims"]
    n_act = sidecar["n_actions"]
    rewards = np.fromfile(base.with_suffix(".raw"), dtype="<f4").astype(float)
    rewards = rewards.reshape(ny, nx, n_act)
    bits = np.frombuffer(bytes.fromhex(sidecar["valid_bitset_hex"]), dtype=np.uint8)
    valid = np.unpackbits(bits)[: ny * nx].astype(bool).reshape(ny, nx)
    return RewardMap(rewards=rewards, valid=valid)


def save_trajectory(path, trajectory: list[dict]) -> None:
    Path(path).write_text(json.dumps(trajectory, indent=2))


def load_trajectory(path) -> list[dict]:
    return json.loads(Path(path).read_text())
