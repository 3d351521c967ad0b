"""Coarse-to-fine recursion around a small-displacement estimator.

At each level the images are halved, registered recursively, the coarse
field is upsampled and doubled, the second image is warped with it and the
estimator adds a correction. Images smaller than the estimator window get a
zero field.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from recureg.image_core import as_image, downsample_half, upsample_double, warp, zero_field


@dataclass
class RecursionConfig:
    """Recursion settings.

    ``max_depth`` caps the number of recursive halvings; ``None`` recurses
    until the images no longer fit the estimator window. With
    ``max_depth=0`` the estimator runs once, on the full-size input.
    """

    max_depth: Optional[int] = None
    capture_trace: bool = False

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be non-negative, got {self.max_depth}")


def _stats(f):
    return {
        "mean": tuple(float(v) for v in f.mean(axis=(0, 1))),
        "min": tuple(float(v) for v in f.min(axis=(0, 1))),
        "max": tuple(float(v) for v in f.max(axis=(0, 1))),
    }


@dataclass
class LevelRecord:
    depth: int
    shape: tuple
    coarse: dict
    correction: dict


@dataclass
class LevelTrace:
    """Per-level diagnostics, finest level first."""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)


def _register(img1, img2, est, cfg, depth, trace, on_level):
    h, w = img1.shape[:2]
    if not est.spec.fits(h, w) or (cfg.max_depth is not None and depth > cfg.max_depth):
        return zero_field(h, w)
    if h >= 2 and w >= 2:
        coarse = _register(downsample_half(img1), downsample_half(img2), est, cfg, depth + 1, trace, on_level)
        d1 = 2 * upsample_double(coarse, h, w)
    else:
        d1 = zero_field(h, w)
    moved = warp(img2, d1)
    d2 = est.estimate(img1, moved)
    if trace is not None:
        trace.levels.insert(0, LevelRecord(depth, (h, w), _stats(d1), _stats(d2)))
    if on_level is not None:
        on_level(depth, img1, moved, d1, d2)
    return d1 + d2


def register(img1, img2, est, cfg=None, on_level=None):
    """Estimate the displacement field from ``img2`` to ``img1``.

    Parameters
    ----------
    img1, img2 : array_like
        Images of identical shape, ``(H, W)`` or ``(H, W, C)``.
    est : Estimator
        Small-displacement estimator; its ``spec`` decides where the
        recursion stops.
    cfg : RecursionConfig, optional
    on_level : callable, optional
        Called as ``on_level(depth, img1, warped_img2, d1, d2)`` after the
        estimator ran at a level, coarsest level first.

    Returns
    -------
    numpy.ndarray or tuple
        The ``(H, W, 2)`` field, or ``(field, LevelTrace)`` when
        ``cfg.capture_trace`` is set.
    """
    cfg = cfg or RecursionConfig()
    img1, img2 = as_image(img1), as_image(img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    trace = LevelTrace() if cfg.capture_trace else None
    d = _register(img1, img2, est, cfg, 0, trace, on_level)
    return (d, trace) if cfg.capture_trace else d


def recursion_levels(shape, spec, cfg=None):
    """Number of levels at which the estimator runs for an input of ``shape``."""
    cfg = cfg or RecursionConfig()
    h, w = shape[:2]
    n = 0
    while spec.fits(h, w) and (cfg.max_depth is None or n <= cfg.max_depth):
        n += 1
        if h < 2 or w < 2:
            break
        h, w = (h + 1) // 2, (w + 1) // 2
    return n


def effective_range(cfg, spec, shape):
    """Largest displacement the recursion is guaranteed to capture.

    Each extra level doubles the range of the base estimator, so with
    ``n`` levels the range is ``mu * 2**(n - 1)``. A single (or no)
    application gives ``mu``.
    """
    n = recursion_levels(shape, spec, cfg)
    return spec.mu * 2 ** max(n - 1, 0)
