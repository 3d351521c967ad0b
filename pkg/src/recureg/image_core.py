"""Raster primitives used by the recursion.

Images are ``(H, W, C)`` float32 arrays and displacement fields are
``(H, W, 2)`` float32 arrays holding ``(dx, dy)`` in pixels of the field's
own resolution. A feature at ``(y, x)`` in the first image sits at
``(y - dy, x - dx)`` in the second one.
"""

import math

import numpy as np
from scipy.ndimage import correlate1d

DTYPE = np.float32


def as_image(img):
    """Return ``img`` as a C-contiguous ``(H, W, C)`` float32 array.

    Two-dimensional input is treated as a single channel image.
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, C) array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"image dimensions must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=DTYPE)


def as_field(field):
    """Return ``field`` as a C-contiguous ``(H, W, 2)`` float32 array."""
    arr = np.asarray(field)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"expected an (H, W, 2) displacement field, got shape {arr.shape}")
    if min(arr.shape[:2]) < 1:
        raise ValueError(f"field dimensions must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=DTYPE)


def zero_field(height, width):
    return np.zeros((height, width, 2), dtype=DTYPE)


def downsample_half(img):
    """Halve the resolution by averaging 2x2 blocks.

    Odd dimensions replicate the last row/column before averaging, so the
    output is ``ceil(H/2) x ceil(W/2)``. Works on any ``(H, W, C)`` grid,
    images and fields alike; values are not rescaled.
    """
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    arr = as_image(arr)
    h, w = arr.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"downsample_half needs at least 2x2 input, got {h}x{w}")
    if h % 2 or w % 2:
        arr = np.pad(arr, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    out = 0.25 * (arr[0::2, 0::2] + arr[1::2, 0::2] + arr[0::2, 1::2] + arr[1::2, 1::2])
    out = out.astype(DTYPE)
    return out[:, :, 0] if squeeze else out


def _align_corners_weights(n_in, n_out):
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(DTYPE)
    return lo, hi, frac


def upsample_double(field, target_h, target_w):
    """Bilinearly resample ``field`` onto a grid about twice as large.

    Corner samples map onto corner samples (align-corners placement). The
    target must be ``2h - 1`` or ``2h`` rows and ``2w - 1`` or ``2w``
    columns so that the shape from before :func:`downsample_half` is
    restored exactly. Values are not scaled.
    """
    arr = np.asarray(field)
    squeeze = arr.ndim == 2
    arr = as_image(arr)
    h, w = arr.shape[:2]
    if target_h not in (2 * h - 1, 2 * h) or target_w not in (2 * w - 1, 2 * w):
        raise ValueError(
            f"cannot upsample {h}x{w} to {target_h}x{target_w}; "
            f"allowed rows {2 * h - 1}..{2 * h}, columns {2 * w - 1}..{2 * w}"
        )
    if target_h < 1 or target_w < 1:
        raise ValueError("target shape must be positive")

    r0, r1, fr = _align_corners_weights(h, target_h)
    c0, c1, fc = _align_corners_weights(w, target_w)
    fr = fr[:, None, None]
    rows = arr[r0] * (1 - fr) + arr[r1] * fr
    fc = fc[None, :, None]
    out = rows[:, c0] * (1 - fc) + rows[:, c1] * fc
    out = out.astype(DTYPE)
    return out[:, :, 0] if squeeze else out


def bilinear_sample(img, ys, xs):
    """Sample ``img`` at fractional coordinates with border replication.

    ``ys`` and ``xs`` are arrays of equal shape ``S``; the result has shape
    ``S + (C,)``.
    """
    arr = as_image(img)
    h, w = arr.shape[:2]
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0, h - 1)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(DTYPE)[..., None]
    wx = (xs - x0).astype(DTYPE)[..., None]
    top = arr[y0, x0] * (1 - wx) + arr[y0, x1] * wx
    bottom = arr[y1, x0] * (1 - wx) + arr[y1, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(DTYPE)


def warp(img, d):
    """Apply the translation operator: ``out(y, x) = img(y - dy, x - dx)``.

    Sampling is bilinear; source coordinates outside the image are clamped
    to the border.
    """
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    arr = as_image(arr)
    d = as_field(d)
    if arr.shape[:2] != d.shape[:2]:
        raise ValueError(f"image {arr.shape[:2]} and field {d.shape[:2]} differ in size")
    h, w = arr.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = bilinear_sample(arr, ys - d[:, :, 1].astype(np.float64), xs - d[:, :, 0].astype(np.float64))
    return out[:, :, 0] if squeeze else out


def gaussian_kernel(sigma):
    """Normalized discrete Gaussian with radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(field, sigma):
    """Separable Gaussian blur of every component with replicated borders.

    ``sigma == 0`` returns the input unchanged.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    arr = np.asarray(field)
    if sigma == 0:
        return arr.astype(DTYPE, copy=True)
    kernel = gaussian_kernel(sigma)
    out = correlate1d(arr.astype(np.float64), kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return out.astype(DTYPE)


def shift_image(img, dx, dy=0):
    """Integer translation with border replication: ``out(y, x) = img(y - dy, x - dx)``."""
    arr = as_image(img)
    h, w = arr.shape[:2]
    ys = np.clip(np.arange(h) - int(dy), 0, h - 1)
    xs = np.clip(np.arange(w) - int(dx), 0, w - 1)
    return arr[ys][:, xs]
