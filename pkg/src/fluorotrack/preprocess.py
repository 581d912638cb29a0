"""Fixed projection-conditioning chain shared by training and inference.

Four stages, always in this order: global standardization, min-max scaling
to [0, 1], empirical histogram equalization, then 2x2 average downsampling.
The first three stages make the chain invariant to positive affine intensity
transforms of the raw projection, so network inputs do not depend on source
intensity or detector gain.
"""

from __future__ import annotations

import numpy as np

from .drr import ProjectionImage

__all__ = [
    "variance_equalize",
    "normalize01",
    "histogram_equalize",
    "downsample_avg2",
    "preprocess_pipeline",
]


def variance_equalize(img: ProjectionImage) -> ProjectionImage:
    """(values - mean) / std over all pixels; constant images map to zero."""
    vals = img.values
    std = float(vals.std())
    if std < 1e-12:
        return ProjectionImage(img.dims, np.zeros(vals.shape))
    return ProjectionImage(img.dims, (vals - vals.mean()) / std)


def normalize01(img: ProjectionImage) -> ProjectionImage:
    """Min-max scaling to [0, 1]; constant images map to 0.5."""
    vals = img.values
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        return ProjectionImage(img.dims, np.full(vals.shape, 0.5))
    return ProjectionImage(img.dims, (vals - lo) / (hi - lo))


def histogram_equalize(img: ProjectionImage, bins: int = 256) -> ProjectionImage:
    """Map each pixel to the empirical CDF of its intensity bin.

    Inputs must already lie in [0, 1] (run normalize01 first); the unit
    value falls in the last bin, so outputs lie in (0, 1].
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    vals = img.values
    if vals.min() < 0.0 or vals.max() > 1.0:
        raise ValueError("histogram equalization expects values in [0, 1]")
    idx = np.minimum((vals * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx.reshape(-1), minlength=bins)
    cdf = np.cumsum(counts) / vals.size
    return ProjectionImage(img.dims, cdf[idx])


def downsample_avg2(img: ProjectionImage) -> ProjectionImage:
    """2x2 block averaging; odd trailing rows/columns are dropped."""
    vals = img.values
    nu, nv = vals.shape[0] // 2, vals.shape[1] // 2
    if nu < 1 or nv < 1:
        raise ValueError("image too small to downsample")
    block = vals[: 2 * nu, : 2 * nv].reshape(nu, 2, nv, 2)
    return ProjectionImage((nu, nv), block.mean(axis=(1, 3)))


def preprocess_pipeline(img: ProjectionImage, bins: int = 256) -> ProjectionImage:
    return downsample_avg2(
        histogram_equalize(normalize01(variance_equalize(img)), bins=bins)
    )
