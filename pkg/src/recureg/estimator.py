"""Small-displacement estimators.

An estimator finds displacements of at most ``mu`` pixels between two
images of equal size. The recursion in :mod:`recureg.pyramid` only ever asks
it for such small corrections.
"""

from dataclasses import dataclass

import numpy as np

from recureg.image_core import DTYPE, as_image


@dataclass(frozen=True)
class EstimatorSpec:
    """Contract of an estimator.

    Attributes
    ----------
    mu : float
        Largest displacement the estimator can detect, in pixels.
    error_bound : float
        Promised maximum error, at most ``mu / 2``.
    min_height, min_width : int
        Smallest input the estimator accepts. The recursion stops once an
        image gets smaller than this.
    """

    mu: float
    error_bound: float
    min_height: int = 1
    min_width: int = 1

    def __post_init__(self):
        if not 0 < self.error_bound <= self.mu / 2:
            raise ValueError(f"error_bound must lie in (0, mu/2], got {self.error_bound} for mu={self.mu}")
        if self.min_height < 1 or self.min_width < 1:
            raise ValueError("minimum window dimensions must be at least 1")

    def fits(self, height, width):
        return height >= self.min_height and width >= self.min_width


class Estimator:
    """Base class; subclasses implement ``_estimate`` on validated input."""

    spec: EstimatorSpec
    stereo: bool = False

    def estimate(self, img1, img2):
        """Displacement field from ``img2`` to ``img1``, shape ``(H, W, 2)``."""
        img1, img2 = as_image(img1), as_image(img2)
        if img1.shape != img2.shape:
            raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
        h, w = img1.shape[:2]
        if not self.spec.fits(h, w):
            raise ValueError(
                f"input {h}x{w} is smaller than the estimator window "
                f"{self.spec.min_height}x{self.spec.min_width}"
            )
        return self._estimate(img1, img2)

    def _estimate(self, img1, img2):
        raise NotImplementedError


def _offsets(mu, stereo):
    dys = [0] if stereo else range(-mu, mu + 1)
    offs = [(dx, dy) for dx in range(-mu, mu + 1) for dy in dys]
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def _box_sum(cost, r):
    padded = np.pad(cost, r, mode="edge")
    k = 2 * r + 1
    rows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0).sum(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1).sum(axis=-1)


def block_match_oracle(img1, img2, mu, patch_radius=3, stereo=False):
    """Exhaustive integer block matching.

    For each pixel, returns the offset ``(dx, dy)`` in ``[-mu, mu]^2`` (or
    ``[-mu, mu] x {0}`` in stereo mode) minimizing the sum of squared
    differences between the patch around ``(y, x)`` in ``img1`` and the
    patch around ``(y - dy, x - dx)`` in ``img2``. Both are border
    replicated. Ties go to the offset with the smallest length, then the
    smallest ``dx``, then the smallest ``dy``.
    """
    img1, img2 = as_image(img1), as_image(img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    if patch_radius < 1:
        raise ValueError(f"patch_radius must be at least 1, got {patch_radius}")
    mu = int(mu)
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    h, w = img1.shape[:2]
    a = img1.astype(np.float64)
    b = np.pad(img2.astype(np.float64), ((mu, mu), (mu, mu), (0, 0)), mode="edge")

    best = np.full((h, w), np.inf)
    out = np.zeros((h, w, 2), dtype=DTYPE)
    for dx, dy in _offsets(mu, stereo):
        moved = b[mu - dy:mu - dy + h, mu - dx:mu - dx + w]
        cost = _box_sum(((a - moved) ** 2).sum(axis=2), patch_radius)
        better = cost < best
        best[better] = cost[better]
        out[better] = (dx, dy)
    return out


class BlockMatchEstimator(Estimator):
    """Integer SSD block matching wrapped in the estimator contract.

    Its quantization error is at most half a pixel, so the contract bound
    is ``max(0.5, mu / 2)`` capped at ``mu / 2``.
    """

    def __init__(self, mu=2, patch_radius=3, stereo=False, min_size=None):
        self.mu = int(mu)
        self.patch_radius = int(patch_radius)
        self.stereo = stereo
        side = 2 * self.patch_radius + 1 if min_size is None else int(min_size)
        self.spec = EstimatorSpec(mu=float(self.mu), error_bound=self.mu / 2, min_height=side, min_width=side)

    def _estimate(self, img1, img2):
        return block_match_oracle(img1, img2, self.mu, self.patch_radius, self.stereo)


# Images live in [0, 1]; the network sees them centered with roughly unit spread.
INPUT_CENTER = 0.5
INPUT_GAIN = 4.0


def network_input(img1, img2, margins):
    """Stack, normalize and replicate-pad an image pair for the network."""
    x = (np.concatenate([img1, img2], axis=2) - INPUT_CENTER) * INPUT_GAIN
    dh, dw = margins
    return np.pad(x, ((dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2), (0, 0)), mode="edge").astype(DTYPE)


def cnn_estimate(net, img1, img2, stereo=True, mu=4.0):
    """Run ``net`` as a sliding-window displacement estimator.

    The two images are concatenated along channels, normalized, padded by replication so
    that the valid convolutions give back the input size, and pushed through
    the network in inference mode. A single output channel is read as ``dx``
    (``dy = 0``); two channels are ``(dx, dy)``. Results are clamped to
    ``[-mu, mu]``.
    """
    img1, img2 = as_image(img1), as_image(img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    if 2 * img1.shape[2] != net.in_channels:
        raise ValueError(f"network expects {net.in_channels} channels, images give {2 * img1.shape[2]}")
    x = network_input(img1, img2, net.margins).astype(net.dtype)
    y = net.forward(x, keep_cache=False, train=False)
    h, w = img1.shape[:2]
    out = np.zeros((h, w, 2), dtype=DTYPE)
    if y.shape[2] == 1:
        out[..., 0] = y[..., 0]
    else:
        out[...] = y[..., :2]
    if stereo:
        out[..., 1] = 0
    return np.clip(out, -mu, mu)


class CNNEstimator(Estimator):
    """Network-backed estimator.

    The minimum window is the network's receptive field, ``15 x 19`` for the
    canonical architecture.
    """

    def __init__(self, net, mu=4.0, stereo=True):
        self.net = net
        self.mu = float(mu)
        self.stereo = stereo
        dh, dw = net.margins
        self.spec = EstimatorSpec(mu=self.mu, error_bound=self.mu / 2, min_height=dh + 1, min_width=dw + 1)

    def _estimate(self, img1, img2):
        return cnn_estimate(self.net, img1, img2, self.stereo, self.mu)
