"""Binary checkpoint format.

Single file: magic ``AGRGNET1``, format version (u32 LE), three sections
(fixed encoder, moving encoder, decoder). Each section starts with a layer
count (u32); each layer record is kind (u8: 0 conv, 1 fully_connected,
2 selu), in/out channels, kernel h/w, stride, dilation (u32 each) and the
weight/bias element counts (u64 each), followed later by the weights. After
the layer tables, all weights and biases follow in layer order as
little-endian float32. A JSON manifest (same path + ``.json``) records
shapes and the training configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Layer, LayerSpec
from .policy import PolicyNetworkParams

MAGIC = b"AGRGNET1"
VERSION = 1
_KIND_CODE = {"conv": 0, "fully_connected": 1, "selu": 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def _layer_record(layer: Layer) -> bytes:
    s = layer.spec
    wn = 0 if layer.w is None else layer.w.size
    bn = 0 if layer.b is None else layer.b.size
    return struct.pack(
        "<BIIIIIIQQ",
        _KIND_CODE[s.kind],
        s.in_channels,
        s.out_channels,
        s.kernel[0],
        s.kernel[1],
        s.stride,
        s.dilation,
        wn,
        bn,
    )


def save_checkpoint(params: PolicyNetworkParams, path, manifest_extra: dict | None = None) -> None:
    """Write the CNN-form parameters and a JSON manifest."""
    if params.is_fcn:
        raise ValueError("checkpoints store the CNN form; convert before saving")
    path = Path(path)
    sections = [params.encoder_fixed, params.encoder_moving, params.decoder]
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(sections))
    for section in sections:
        blob += struct.pack("<I", len(section))
        for layer in section:
            blob += _layer_record(layer)
    for section in sections:
        for layer in section:
            if layer.w is not None:
                blob += np.asarray(layer.w, dtype="<f4").tobytes()
                blob += np.asarray(layer.b, dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))

    manifest = {
        "format": MAGIC.decode(),
        "version": VERSION,
        "output_dim": params.output_dim,
        "width_div": params.width_div,
        "feature_dim": params.feature_dim,
        "sections": [
            [
                {
                    "kind": layer.spec.kind,
                    "in_channels": layer.spec.in_channels,
                    "out_channels": layer.spec.out_channels,
                    "kernel": list(layer.spec.kernel),
                    "stride": layer.spec.stride,
                    "dilation": layer.spec.dilation,
                    "w_shape": list(layer.w.shape) if layer.w is not None else [],
                }
                for layer in section
            ]
            for section in sections
        ],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path) -> tuple[PolicyNetworkParams, dict]:
    """Read a checkpoint; returns (params, manifest)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("bad checkpoint magic")
    off = 8
    version, n_sections = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    tables = []
    for _ in range(n_sections):
        (n_layers,) = struct.unpack_from("<I", raw, off)
        off += 4
        records = []
        for _ in range(n_layers):
            rec = struct.unpack_from("<BIIIIIIQQ", raw, off)
            off += struct.calcsize("<BIIIIIIQQ")
            records.append(rec)
        tables.append(records)

    sections = []
    for records in tables:
        layers = []
        for kind_code, in_c, out_c, kh, kw, stride, dil, wn, bn in records:
            kind = _CODE_KIND[kind_code]
            spec = LayerSpec(kind, in_c, out_c, (kh, kw), stride, dil)
            w = b_arr = None
            if wn:
                w = np.frombuffer(raw, dtype="<f4", count=wn, offset=off).astype(float)
                off += 4 * wn
                b_arr = np.frombuffer(raw, dtype="<f4", count=bn, offset=off).astype(float)
                off += 4 * bn
                if kind == "conv":
                    w = w.reshape(out_c, in_c, kh, kw)
                else:
                    w = w.reshape(out_c, in_c)
            layers.append(Layer(spec=spec, w=w, b=b_arr))
        sections.append(layers)

    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    params = PolicyNetworkParams(
        encoder_fixed=sections[0],
        encoder_moving=sections[1],
        decoder=sections[2],
        output_dim=manifest["output_dim"],
        width_div=manifest["width_div"],
        feature_dim=manifest["feature_dim"],
    )
    return params, manifest
