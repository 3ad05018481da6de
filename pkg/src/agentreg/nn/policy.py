"""Reward-estimation network: two independent ROI encoders whose features are
concatenated and decoded into per-action reward estimates, plus the
weight-preserving conversion of the whole stack into a dilated FCN that
evaluates every ROI of a full image in one pass.

Encoder structure (channel widths divided by ``width_div``):

    input 61x61x1
    conv1 3x3x32    conv2 3x3x32
    conv3 3x3x64 s2 conv4 3x3x64
    conv5 3x3x128 s2 conv6 3x3x128
    conv7 3x3x256 s2
    fc1 1024  fc2 1024  output 128

SELU follows every layer except the input and the final layer of each stack.
The decoder is fc 2*128 -> 1024 -> 1024 -> output_dim. In the dilated form
every stride-s layer becomes stride 1 and all subsequent dilations are
multiplied by s; the first fully connected layer becomes a convolution over
its remaining spatial extent and the rest become pointwise convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import (
    Layer,
    LayerSpec,
    conv_output_size,
    mse_loss,
    stack_backward,
    stack_forward,
)

ROI_SIZE = 61

_ENCODER_CONVS = [
    # (out_channels_base, stride)
    (32, 1),
    (32, 1),
    (64, 2),
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
]
_ENCODER_FC = [1024, 1024]
_ENCODER_OUT = 128
_DECODER_FC = [1024, 1024]


@dataclass
class PolicyNetworkParams:
    encoder_fixed: list
    encoder_moving: list
    decoder: list
    output_dim: int
    width_div: int
    feature_dim: int
    is_fcn: bool = False

    def all_layers(self) -> list:
        return self.encoder_fixed + self.encoder_moving + self.decoder

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.all_layers())


def _scaled(base: int, div: int) -> int:
    return max(1, base // div)


def encoder_tail_size(input_size: int = ROI_SIZE) -> int:
    """Spatial size left after the conv stack (the fc1 kernel size)."""
    s = input_size
    for _, stride in _ENCODER_CONVS:
        s = conv_output_size(s, 3, stride, 1)
    return s


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _conv_layer(rng, in_c, out_c, kernel, dtype, stride=1, dilation=1) -> Layer:
    kh, kw = kernel
    w = _glorot(rng, (out_c, in_c, kh, kw), in_c * kh * kw, out_c * kh * kw, dtype)
    return Layer(
        spec=LayerSpec("conv", in_c, out_c, (kh, kw), stride, dilation),
        w=w,
        b=np.zeros(out_c, dtype=dtype),
    )


def _fc_layer(rng, in_f, out_f, dtype) -> Layer:
    return Layer(
        spec=LayerSpec("fully_connected", in_f, out_f),
        w=_glorot(rng, (out_f, in_f), in_f, out_f, dtype),
        b=np.zeros(out_f, dtype=dtype),
    )


def _selu_layer() -> Layer:
    return Layer(spec=LayerSpec("selu"))


def _build_encoder(rng, width_div: int, input_size: int, dtype) -> list:
    layers = []
    in_c = 1
    for base, stride in _ENCODER_CONVS:
        out_c = _scaled(base, width_div)
        layers.append(_conv_layer(rng, in_c, out_c, (3, 3), dtype, stride=stride))
        layers.append(_selu_layer())
        in_c = out_c
    tail = encoder_tail_size(input_size)
    in_f = in_c * tail * tail
    for base in _ENCODER_FC:
        out_f = _scaled(base, width_div)
        layers.append(_fc_layer(rng, in_f, out_f, dtype))
        layers.append(_selu_layer())
        in_f = out_f
    layers.append(_fc_layer(rng, in_f, _scaled(_ENCODER_OUT, width_div), dtype))
    return layers


def network_dtype(params: "PolicyNetworkParams") -> np.dtype:
    for layer in params.all_layers():
        if layer.w is not None:
            return layer.w.dtype
    return np.dtype(float)


def init_policy_network(
    seed: int, output_dim: int = 12, width_div: int = 4, dtype=np.float64
) -> PolicyNetworkParams:
    """Seeded Glorot-uniform initialization; biases start at zero.

    The two encoder streams are initialized independently (no weight
    sharing). ``width_div`` scales every channel width; 1 restores the
    full-width configuration. ``dtype`` sets the compute precision (training
    runs in float32; checkpoints are float32 either way).
    """
    if output_dim not in (6, 12):
        raise ValueError("output_dim must be 6 or 12")
    rng = np.random.default_rng(seed)
    feature_dim = _scaled(_ENCODER_OUT, width_div)
    encoder_fixed = _build_encoder(rng, width_div, ROI_SIZE, dtype)
    encoder_moving = _build_encoder(rng, width_div, ROI_SIZE, dtype)
    decoder = []
    in_f = 2 * feature_dim
    for base in _DECODER_FC:
        out_f = _scaled(base, width_div)
        decoder.append(_fc_layer(rng, in_f, out_f, dtype))
        decoder.append(_selu_layer())
        in_f = out_f
    decoder.append(_fc_layer(rng, in_f, output_dim, dtype))
    return PolicyNetworkParams(
        encoder_fixed=encoder_fixed,
        encoder_moving=encoder_moving,
        decoder=decoder,
        output_dim=output_dim,
        width_div=width_div,
        feature_dim=feature_dim,
    )


def _stack_dtype(layers: list) -> np.dtype:
    for layer in layers:
        if layer.w is not None:
            return layer.w.dtype
    return np.dtype(float)


def encoder_forward(layers: list, roi: np.ndarray) -> np.ndarray:
    """Feature vector for one ROI shaped exactly (61, 61)."""
    roi = np.asarray(roi, dtype=_stack_dtype(layers))
    if roi.shape != (ROI_SIZE, ROI_SIZE):
        raise ValueError(f"encoder expects a {ROI_SIZE}x{ROI_SIZE} ROI, got {roi.shape}")
    out = stack_forward(layers, roi[None, None])
    return out[0]


def decoder_forward(decoder: list, feat_fixed: np.ndarray, feat_moving: np.ndarray) -> np.ndarray:
    """Per-action reward estimates from the two concatenated features."""
    x = np.concatenate([np.asarray(feat_fixed).ravel(), np.asarray(feat_moving).ravel()])
    return stack_forward(decoder, x[None].astype(_stack_dtype(decoder)))[0]


def expand_action_estimates(out: np.ndarray, output_dim: int) -> np.ndarray:
    """Map network outputs to 12 per-action estimates.

    With output_dim 12 this is the identity. With output_dim 6 the network
    estimates the positive action per generator and the negative action is
    its negation, interleaved to the canonical action order.
    """
    out = np.asarray(out)
    if output_dim == 12:
        return out
    expanded = np.empty(out.shape[:-1] + (12,), dtype=out.dtype)
    expanded[..., 0::2] = out
    expanded[..., 1::2] = -out
    return expanded


def reduce_action_targets(targets12: np.ndarray, output_dim: int) -> np.ndarray:
    """Supervision targets in network output space (see expand_action_estimates)."""
    if output_dim == 12:
        return targets12
    return targets12[..., 0::2]


# ---------------------------------------------------------------------------
# CNN -> dilated FCN conversion
# ---------------------------------------------------------------------------


def _convert_encoder(layers: list, input_size: int) -> list:
    converted = []
    running = 1
    fc_index = 0
    tail = encoder_tail_size(input_size)
    channels_before_fc = None
    for layer in layers:
        spec = layer.spec
        if spec.kind == "selu":
            converted.append(_selu_layer())
        elif spec.kind == "conv":
            new_spec = replace(spec, stride=1, dilation=spec.dilation * running)
            converted.append(Layer(spec=new_spec, w=layer.w, b=layer.b))
            running *= spec.stride
            channels_before_fc = spec.out_channels
        else:  # fully connected
            if fc_index == 0:
                c = channels_before_fc
                w = layer.w.reshape(spec.out_channels, c, tail, tail)
                new_spec = LayerSpec(
                    "conv", c, spec.out_channels, (tail, tail), stride=1, dilation=running
                )
            else:
                w = layer.w.reshape(spec.out_channels, spec.in_channels, 1, 1)
                new_spec = LayerSpec(
                    "conv", spec.in_channels, spec.out_channels, (1, 1), stride=1, dilation=1
                )
            converted.append(Layer(spec=new_spec, w=w, b=layer.b))
            fc_index += 1
    return converted


def _convert_decoder(layers: list) -> list:
    converted = []
    for layer in layers:
        spec = layer.spec
        if spec.kind == "selu":
            converted.append(_selu_layer())
        else:
            w = layer.w.reshape(spec.out_channels, spec.in_channels, 1, 1)
            new_spec = LayerSpec(
                "conv", spec.in_channels, spec.out_channels, (1, 1), stride=1, dilation=1
            )
            converted.append(Layer(spec=new_spec, w=w, b=layer.b))
    return converted


def to_dilated_fcn(params: PolicyNetworkParams) -> PolicyNetworkParams:
    """Weight-preserving dilated-FCN form of the network.

    The returned layers share weight storage with the input (reshaped views
    where possible), so in-place updates through either form stay in sync.
    """
    if params.is_fcn:
        return params
    return PolicyNetworkParams(
        encoder_fixed=_convert_encoder(params.encoder_fixed, ROI_SIZE),
        encoder_moving=_convert_encoder(params.encoder_moving, ROI_SIZE),
        decoder=_convert_decoder(params.decoder),
        output_dim=params.output_dim,
        width_div=params.width_div,
        feature_dim=params.feature_dim,
        is_fcn=True,
    )


def fcn_natural_reduction(layers: list) -> int:
    """Total spatial shrink of a stride-1 dilated stack."""
    total = 0
    for layer in layers:
        spec = layer.spec
        if spec.kind == "conv":
            total += spec.dilation * (spec.kernel[0] - 1)
    return total


def fcn_forward(params: PolicyNetworkParams, image: np.ndarray, want_cache: bool = False):
    """Dense feature map of one encoder stream over a full image.

    Only used through :func:`fcn_encode`; kept for interface symmetry.
    """
    return fcn_encode(params.encoder_fixed, image, want_cache)


def fcn_encode(encoder_fcn: list, image: np.ndarray, want_cache: bool = False):
    """Dense encoder features for every ROI anchor of ``image``.

    Output is (C, H-60, W-60): pixel (y, x) equals the encoder applied to
    the 61x61 window whose top-left corner is (y, x). The natural output of
    the dilated stack is trimmed (bottom/right) to that extent.
    """
    image = np.asarray(image, dtype=_stack_dtype(encoder_fcn))
    h, w = image.shape
    if h < ROI_SIZE or w < ROI_SIZE:
        raise ValueError(f"image {image.shape} smaller than the {ROI_SIZE} receptive field")
    out = stack_forward(encoder_fcn, image[None, None], want_cache=want_cache)
    if want_cache:
        feat, tape = out
    else:
        feat = out
    trim_h = (h - fcn_natural_reduction(encoder_fcn)) - (h - (ROI_SIZE - 1))
    feat_t = feat[0][:, : feat.shape[2] - trim_h, : feat.shape[3] - trim_h]
    return (feat_t, feat.shape, tape) if want_cache else feat_t


def dense_decode(decoder_fcn: list, feat_fixed: np.ndarray, feat_moving: np.ndarray,
                 want_cache: bool = False):
    """Apply the pointwise decoder at every anchor of two feature maps."""
    x = np.concatenate([feat_fixed, feat_moving], axis=0)[None]
    out = stack_forward(decoder_fcn, x, want_cache=want_cache)
    if want_cache:
        y, tape = out
        return y[0], tape
    return out[0]


def shift_feature_map(feat: np.ndarray, shift_px) -> np.ndarray:
    """Integer-pixel shift of a (C, H, W) map; vacated cells become zero.

    ``shift_px`` is (sx, sy): the map content moves by +sx along x (width)
    and +sy along y (height).
    """
    sx, sy = int(shift_px[0]), int(shift_px[1])
    c, h, w = feat.shape
    if abs(sx) >= w or abs(sy) >= h:
        raise ValueError("shift exceeds the map extent")
    out = np.zeros_like(feat)
    src_y = slice(max(0, -sy), h - max(0, sy))
    src_x = slice(max(0, -sx), w - max(0, sx))
    dst_y = slice(max(0, sy), h - max(0, -sy))
    dst_x = slice(max(0, sx), w - max(0, -sx))
    out[:, dst_y, dst_x] = feat[:, src_y, src_x]
    return out


def shift_valid_mask(shape, shift_px) -> np.ndarray:
    """Mask of map cells whose shifted content is real (not zero fill)."""
    h, w = shape
    sx, sy = int(shift_px[0]), int(shift_px[1])
    mask = np.zeros((h, w), dtype=bool)
    mask[max(0, sy) : h - max(0, -sy), max(0, sx) : w - max(0, -sx)] = True
    return mask


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------

GRAD_CLIP_NORM = 10.0


class NonFiniteGradients(RuntimeError):
    pass


def _clip_and_apply(layer_grad_pairs: list, learning_rate: float) -> None:
    """Global-norm clipping followed by an in-place SGD update.

    Raises NonFiniteGradients (before touching any weight) if any gradient
    is non-finite.
    """
    sq = 0.0
    for _, (dw, db) in layer_grad_pairs:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteGradients("non-finite gradient; parameters unchanged")
        sq += float(np.sum(dw * dw)) + float(np.sum(db * db))
    norm = np.sqrt(sq)
    scale = learning_rate * (GRAD_CLIP_NORM / norm if norm > GRAD_CLIP_NORM else 1.0)
    for layer, (dw, db) in layer_grad_pairs:
        layer.w -= scale * dw.reshape(layer.w.shape)
        layer.b -= scale * db


def _collect(layers: list, grads: list) -> list:
    return [(layer, g) for layer, g in zip(layers, grads) if g is not None]


def cnn_pair_forward(params: PolicyNetworkParams, roi_fixed, roi_moving, want_cache=False):
    """Full CNN forward on a batch of ROI pairs: (N, 61, 61) each."""
    dt = network_dtype(params)
    xf = np.asarray(roi_fixed, dtype=dt)
    xm = np.asarray(roi_moving, dtype=dt)
    if xf.ndim == 2:
        xf = xf[None]
        xm = xm[None]
    ff = stack_forward(params.encoder_fixed, xf[:, None], want_cache=want_cache)
    fm = stack_forward(params.encoder_moving, xm[:, None], want_cache=want_cache)
    if want_cache:
        ff, tape_f = ff
        fm, tape_m = fm
    concat = np.concatenate([ff, fm], axis=1)
    out = stack_forward(params.decoder, concat, want_cache=want_cache)
    if want_cache:
        out, tape_d = out
        return out, (tape_f, tape_m, tape_d, ff.shape[1])
    return out


def cnn_pair_backward(params: PolicyNetworkParams, caches, d_out: np.ndarray) -> list:
    tape_f, tape_m, tape_d, split = caches
    d_concat, g_dec = stack_backward(params.decoder, tape_d, d_out)
    _, g_f = stack_backward(params.encoder_fixed, tape_f, d_concat[:, :split])
    _, g_m = stack_backward(params.encoder_moving, tape_m, d_concat[:, split:])
    return (
        _collect(params.decoder, g_dec)
        + _collect(params.encoder_fixed, g_f)
        + _collect(params.encoder_moving, g_m)
    )


def train_step(params: PolicyNetworkParams, batch: list, learning_rate: float):
    """One gradient-descent update on a batch of (roi_fixed, roi_moving,
    targets) tuples; returns (params, pre-update loss)."""
    dt = network_dtype(params)
    xf = np.stack([np.asarray(s[0], dtype=dt) for s in batch])
    xm = np.stack([np.asarray(s[1], dtype=dt) for s in batch])
    tgt = np.stack([np.asarray(s[2], dtype=dt) for s in batch])
    if not (np.all(np.isfinite(xf)) and np.all(np.isfinite(xm)) and np.all(np.isfinite(tgt))):
        raise ValueError("non-finite training inputs")
    out, caches = cnn_pair_forward(params, xf, xm, want_cache=True)
    loss, d_out = mse_loss(out, tgt)
    if learning_rate != 0.0:
        pairs = cnn_pair_backward(params, caches, d_out)
        _clip_and_apply(pairs, learning_rate)
    return params, loss


def fcn_train_step(
    params: PolicyNetworkParams,
    fcn: PolicyNetworkParams,
    feat_fixed: np.ndarray,
    enc_tape_f,
    enc_shape_f,
    feat_moving: np.ndarray,
    enc_tape_m,
    enc_shape_m,
    shift_px,
    target12: np.ndarray,
    valid: np.ndarray,
    learning_rate: float,
) -> float:
    """One dense update for a single feature-map shift.

    Encoder features (and their tapes) are computed once per pair by the
    caller; this decodes the shifted map, applies the masked Euclidean loss
    and updates all weights. Returns the pre-update loss.
    """
    shifted = shift_feature_map(feat_moving, shift_px)
    pred, tape_d = dense_decode(fcn.decoder, feat_fixed, shifted, want_cache=True)
    target = reduce_action_targets(np.asarray(target12, dtype=pred.dtype), params.output_dim)
    target_cf = np.moveaxis(target, -1, 0)  # (C_out, h, w)
    mask = (valid & shift_valid_mask(valid.shape, shift_px))[None]
    loss, d_pred = mse_loss(pred, target_cf, mask)

    d_concat, g_dec = stack_backward(fcn.decoder, tape_d, d_pred[None])
    c = feat_fixed.shape[0]
    d_ff = d_concat[0, :c]
    d_fm_shifted = d_concat[0, c:]
    d_fm = shift_feature_map(d_fm_shifted, (-shift_px[0], -shift_px[1]))

    d_ff_full = _untrim(d_ff, enc_shape_f)
    d_fm_full = _untrim(d_fm, enc_shape_m)
    _, g_f = stack_backward(fcn.encoder_fixed, enc_tape_f, d_ff_full)
    _, g_m = stack_backward(fcn.encoder_moving, enc_tape_m, d_fm_full)
    pairs = (
        _collect(fcn.decoder, g_dec)
        + _collect(fcn.encoder_fixed, g_f)
        + _collect(fcn.encoder_moving, g_m)
    )
    _clip_and_apply(pairs, learning_rate)
    return loss


def _untrim(d_feat: np.ndarray, natural_shape) -> np.ndarray:
    """Zero-pad a trimmed feature-map gradient back to the natural extent."""
    full = np.zeros(natural_shape, dtype=d_feat.dtype)
    full[0, :, : d_feat.shape[1], : d_feat.shape[2]] = d_feat
    return full
