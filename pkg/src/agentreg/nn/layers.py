"""Layer primitives with explicit forward/backward passes.

All convolutions are valid (zero padding) cross-correlations; stride and
dilation are mutually exclusive per layer. Data layout is (N, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | fully_connected | selu
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)  # (kh, kw)
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "fully_connected", "selu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.stride > 1 and self.dilation > 1:
            raise ValueError("stride and dilation are mutually exclusive")


@dataclass
class Layer:
    """A layer spec plus its weights (None for parameter-free layers)."""

    spec: LayerSpec
    w: np.ndarray | None = None
    b: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    def n_params(self) -> int:
        n = 0
        if self.w is not None:
            n += self.w.size
        if self.b is not None:
            n += self.b.size
        return n


def selu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * (np.exp(x) - 1.0))


def selu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * np.where(x > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(x))


def conv_output_size(size: int, kernel: int, stride: int, dilation: int) -> int:
    eff = dilation * (kernel - 1) + 1
    if size < eff:
        raise ValueError(f"input size {size} smaller than effective kernel {eff}")
    return (size - eff) // stride + 1


def _patch_matrix(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int):
    """im2col: (N, C, H, W) -> (N*Ho*Wo, C*kh*kw) plus output dims."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, dilation)
    wo = conv_output_size(w, kw, stride, dilation)
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (eff_h, eff_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]
    # -> (N, Ho, Wo, C, kh, kw) then flatten
    patches = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return patches.reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    cache: bool = False,
):
    """Valid cross-correlation. ``w`` is (O, C, kh, kw).

    Returns the output, or (output, cache) when ``cache`` is set.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input {c}, weights expect {ci}")

    if kh == 1 and kw == 1 and stride == 1 and dilation == 1:
        # pointwise fast path
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, c)
        y2 = x2 @ w.reshape(o, c).T + b
        y = y2.reshape(n, h, wd, o).transpose(0, 3, 1, 2)
        ctx = ("pointwise", x2, (n, h, wd), x.shape)
    else:
        patches, ho, wo = _patch_matrix(x, kh, kw, stride, dilation)
        y2 = patches @ w.reshape(o, -1).T + b
        y = y2.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        ctx = ("general", patches, (n, ho, wo), x.shape)
    if squeeze:
        y = y[0, 0] if o == 1 else y[0]
    return (y, ctx) if cache else y


def conv2d_backward(dy: np.ndarray, ctx, w: np.ndarray, stride: int, dilation: int):
    """Gradients of conv2d: returns (dx, dw, db)."""
    kind, stored, dims, x_shape = ctx
    o, c, kh, kw = w.shape
    n, ho, wo = dims
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
    db = dy2.sum(axis=0)
    dw2 = dy2.T @ stored
    dw = dw2.reshape(o, c, kh, kw)

    if kind == "pointwise":
        dx2 = dy2 @ w.reshape(o, c)
        dx = dx2.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        return dx, dw, db

    # one gemm, then scatter each kernel tap into the input grid
    dcols = dy2 @ w.reshape(o, -1)  # (N*Ho*Wo, C*kh*kw)
    dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for a in range(kh):
        for bcol in range(kw):
            dx[
                :,
                :,
                a * dilation : a * dilation + stride * (ho - 1) + 1 : stride,
                bcol * dilation : bcol * dilation + stride * (wo - 1) + 1 : stride,
            ] += dcols[:, :, a, bcol]
    return dx, dw, db


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, cache: bool = False):
    """Fully connected layer on flattened inputs. ``w`` is (out, in)."""
    x = np.asarray(x)
    x2 = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    y = x2 @ w.T + b
    return (y, (x2, x.shape)) if cache else y


def fc_backward(dy: np.ndarray, ctx, w: np.ndarray):
    x2, x_shape = ctx
    dw = dy.T @ x2
    db = dy.sum(axis=0)
    dx = (dy @ w).reshape(x_shape)
    return dx, dw, db


def stack_forward(layers: list[Layer], x: np.ndarray, want_cache: bool = False):
    """Run a layer list; optionally keep per-layer caches for backward."""
    tape = []
    for layer in layers:
        spec = layer.spec
        if spec.kind == "selu":
            if want_cache:
                tape.append(("selu", x))
            x = selu(x)
        elif spec.kind == "conv":
            if want_cache:
                x, ctx = conv2d(x, layer.w, layer.b, spec.stride, spec.dilation, cache=True)
                tape.append(("conv", ctx))
            else:
                x = conv2d(x, layer.w, layer.b, spec.stride, spec.dilation)
        elif spec.kind == "fully_connected":
            if want_cache:
                x, ctx = fc_forward(x, layer.w, layer.b, cache=True)
                tape.append(("fc", ctx))
            else:
                x = fc_forward(x, layer.w, layer.b)
    return (x, tape) if want_cache else x


def stack_backward(layers: list[Layer], tape: list, dy: np.ndarray):
    """Backward through a layer list; returns (dx, grads).

    ``grads`` aligns with ``layers``; parameter-free entries hold None.
    """
    grads: list = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        kind, ctx = tape[i]
        layer = layers[i]
        if kind == "selu":
            dy = selu_backward(dy, ctx)
        elif kind == "conv":
            dy, dw, db = conv2d_backward(dy, ctx, layer.w, layer.spec.stride, layer.spec.dilation)
            grads[i] = (dw, db)
        elif kind == "fc":
            dy, dw, db = fc_backward(dy, ctx, layer.w)
            grads[i] = (dw, db)
    return dy, grads


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error and its gradient w.r.t. ``pred``.

    With a mask, masked entries contribute neither loss nor gradient; the
    mean runs over unmasked scalar entries.
    """
    diff = pred - target
    if mask is not None:
        diff = diff * mask
        denom = float(np.sum(mask)) * (diff.size / mask.size)
        if denom == 0:
            return 0.0, np.zeros_like(pred)
    else:
        denom = float(diff.size)
    loss = float(np.sum(diff * diff) / denom)
    grad = (2.0 / denom) * diff
    return loss, grad
