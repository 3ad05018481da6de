"""Gradient-correlation image similarity."""

from __future__ import annotations

import warnings

import numpy as np

from .projection import Image2D


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation; None when either input has zero variance."""
    a = a.ravel()
    b = b.ravel()
    am = a - a.mean()
    bm = b - b.mean()
    va = float(am @ am)
    vb = float(bm @ bm)
    if va < 1e-24 or vb < 1e-24:
        return None
    return float((am @ bm) / np.sqrt(va * vb))


def gradient_correlation(a: Image2D, b: Image2D) -> float:
    """Mean Pearson correlation of the central-difference x- and y-gradients.

    Degenerate inputs (zero gradient variance, e.g. constant images) score 0
    and raise a ``UserWarning``.
    """
    if a.dims != b.dims:
        raise ValueError("gradient correlation requires equal image dims")
    ga_y, ga_x = np.gradient(a.data)
    gb_y, gb_x = np.gradient(b.data)
    cx = _pearson(ga_x, gb_x)
    cy = _pearson(ga_y, gb_y)
    if cx is None or cy is None:
        warnings.warn("gradient correlation of a constant image is defined as 0")
        return 0.0
    return 0.5 * (cx + cy)
