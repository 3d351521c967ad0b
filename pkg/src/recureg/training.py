"""Self-synthesizing training for the network estimator.

Training pairs come from running the recursion with the current network:
every level it visits yields an input (``img1``, ``warp(img2, d1)``) and a
target, the ground truth at that level minus ``d1``. Targets are blurred,
and pixels whose residual is too large to be seen inside one window are
masked out of the loss. Gradients do not flow through the recursion; ``d1``
is a constant.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from recureg.cnn import Adam
from recureg.estimator import CNNEstimator, network_input
from recureg.image_core import (
    DTYPE,
    as_field,
    as_image,
    bilinear_sample,
    downsample_half,
    gaussian_blur,
    warp,
)
from recureg.pyramid import RecursionConfig, register

log = logging.getLogger(__name__)


def make_rng(seed):
    """The one PRNG used everywhere: numpy's PCG64, seeded explicitly."""
    return np.random.Generator(np.random.PCG64(seed))


def max_gradient(field):
    """Largest absolute forward difference of any component along either axis."""
    f = np.asarray(field, dtype=np.float64)
    g = 0.0
    if f.shape[0] > 1:
        g = max(g, float(np.abs(np.diff(f, axis=0)).max()))
    if f.shape[1] > 1:
        g = max(g, float(np.abs(np.diff(f, axis=1)).max()))
    return g


def interior_mask(d, margin=8):
    """Pixels at least ``margin`` px inside the frame whose partner
    ``x - d(x)`` is also at least ``margin`` px inside."""
    d = np.asarray(d)
    h, w = d.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    def inside(y, x):
        return (y >= margin) & (y <= h - 1 - margin) & (x >= margin) & (x <= w - 1 - margin)

    return inside(ys, xs) & inside(ys - d[..., 1], xs - d[..., 0])


def random_texture(rng, height, width, channels=3):
    """Multi-octave colored noise scaled to [0, 1]."""
    img = np.zeros((height, width, channels))
    for sigma in (0.7, 1.5, 3.0, 6.0):
        img += sigma * gaussian_filter(rng.random((height, width, channels)), (sigma, sigma, 0))
    img -= img.min(axis=(0, 1))
    img /= np.maximum(img.max(axis=(0, 1)), 1e-12)
    return img.astype(DTYPE)


def invert_field(d, tol=1e-6, max_iter=200):
    """Field ``g`` with ``g(y) = -d(x)`` where ``x - d(x) = y``.

    Solved by fixed-point iteration ``x <- y + d(x)``, which converges when
    the slope of ``d`` stays below 1. Then ``warp(img, g)`` is an image in
    which the content of ``img`` at ``x`` sits at ``x - d(x)``.
    """
    d = as_field(d)
    if max_gradient(d) >= 1:
        raise ValueError("field slope must stay below 1 to be invertible")
    h, w = d.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    px, py = xs.copy(), ys.copy()
    for _ in range(max_iter):
        s = bilinear_sample(d, py, px).astype(np.float64)
        nx, ny = xs + s[..., 0], ys + s[..., 1]
        step = max(np.abs(nx - px).max(), np.abs(ny - py).max())
        px, py = nx, ny
        if step < tol:
            break
    return -bilinear_sample(d, py, px)


@dataclass
class DistortionSpec:
    """Random displacement field recipe.

    ``smoothness_sigma = inf`` produces constant fields (pure shifts). With
    ``random_magnitude`` the peak magnitude is drawn uniformly from
    ``[-max_magnitude, max_magnitude]`` instead of being hit exactly.
    """

    max_magnitude: float
    continuity: float = 0.5
    smoothness_sigma: float = 16.0
    stereo: bool = False
    random_magnitude: bool = False

    def __post_init__(self):
        if self.max_magnitude < 0:
            raise ValueError("max_magnitude must be non-negative")
        if not 0 < self.continuity < 1:
            raise ValueError("continuity bound must lie in (0, 1)")
        if self.smoothness_sigma <= 0:
            raise ValueError("smoothness_sigma must be positive")

    @property
    def constant(self):
        return math.isinf(self.smoothness_sigma)


@dataclass
class TrainSample:
    img1: np.ndarray
    img2: np.ndarray
    truth: np.ndarray
    provenance: str = "synthetic"


def synth_field(shape, spec, rng):
    h, w = shape
    n_comp = 1 if spec.stereo else 2
    if spec.constant:
        vec = rng.normal(size=n_comp)
        if spec.stereo:
            vec = np.abs(vec)
        field = np.zeros((h, w, 2))
        field[..., :n_comp] = vec
    else:
        if min(h, w) < 4 * spec.smoothness_sigma:
            raise ValueError(
                f"image {h}x{w} is too small for smoothness sigma {spec.smoothness_sigma} (needs 4 sigma per side)"
            )
        field = np.zeros((h, w, 2))
        for c in range(n_comp):
            field[..., c] = gaussian_filter(rng.normal(size=(h, w)), spec.smoothness_sigma)
    peak = np.abs(field).max()
    scale = spec.max_magnitude / peak if peak > 0 else 0.0
    if spec.random_magnitude:
        scale *= rng.uniform(-1, 1)
    field *= scale
    g = max_gradient(field)
    if g >= spec.continuity:
        shrink = 0.99 * spec.continuity / g
        if shrink < 0.25:
            raise ValueError(
                f"continuity bound {spec.continuity} is too small for magnitude "
                f"{spec.max_magnitude} at smoothness {spec.smoothness_sigma}"
            )
        field *= shrink
    return field.astype(DTYPE)


def synth_distortion(img, spec, seed):
    """Distort ``img`` with a random field.

    Returns a sample with ``img1 = img`` and ``img2`` built so that
    ``img1(x)`` matches ``img2(x - truth(x))``.
    """
    img = as_image(img)
    rng = make_rng(seed)
    truth = synth_field(img.shape[:2], spec, rng)
    if spec.max_magnitude == 0:
        return TrainSample(img, img.copy(), truth)
    if spec.constant:
        img2 = warp(img, -truth)
    else:
        img2 = warp(img, invert_field(truth))
    return TrainSample(img, img2, truth)


def resample_truth(truth, shape):
    """Area-downsample ``truth`` to ``shape``, dividing values by 2 per halving.

    Holes (non-finite values) stay holes if any contributing pixel is a hole.
    Returns ``(field, hole_mask)``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    holes = ~np.all(np.isfinite(truth), axis=2)
    f = np.where(holes[..., None], 0.0, truth)
    hm = holes.astype(np.float64)
    while f.shape[:2] != tuple(shape):
        if f.shape[0] < shape[0] or f.shape[1] < shape[1] or min(f.shape[:2]) < 2:
            raise RuntimeError(f"cannot resample truth {truth.shape[:2]} to {shape}")
        f = downsample_half(f) / 2
        hm = downsample_half(hm[..., None])[..., 0]
    return f.astype(DTYPE), hm > 0


def residual_target(truth, d1, blur_sigma=1.0, mask_limit=4.0):
    """Training target and loss mask for one recursion level.

    ``target = blur(resampled_truth - d1)``; the mask keeps pixels whose
    target stays within ``mask_limit`` in both components and whose truth
    is known.
    """
    d1 = as_field(d1)
    t, holes = resample_truth(truth, d1.shape[:2])
    resid = np.where(holes[..., None], 0.0, t - d1)
    target = gaussian_blur(resid, blur_sigma)
    mask = (np.abs(target).max(axis=2) <= mask_limit) & ~holes
    return target, mask


def hue_rotate(img, angle):
    """Rotate RGB colors about the gray axis by ``angle`` radians."""
    if angle == 0:
        return img.copy()
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / math.sqrt(3)
    rot = c * np.eye(3) + (1 - c) / 3 * np.ones((3, 3)) + s * k
    out = img.copy()
    for start in range(0, img.shape[2] - 2, 3):
        out[..., start:start + 3] = np.clip(img[..., start:start + 3] @ rot.T, 0, 1)
    return out.astype(DTYPE)


def mirror(sample):
    """Horizontal mirror; ``dx`` changes sign, holes stay holes."""
    truth = sample.truth[:, ::-1].copy()
    truth[..., 0] = -truth[..., 0]
    return TrainSample(sample.img1[:, ::-1].copy(), sample.img2[:, ::-1].copy(), truth, sample.provenance)


def augment(sample, seed, hue=True, flip=True):
    """Random horizontal mirror and a hue rotation shared by both images."""
    rng = make_rng(seed)
    do_flip = flip and rng.random() < 0.5
    angle = rng.uniform(0, 2 * math.pi) if hue else 0.0
    out = mirror(sample) if do_flip else sample
    if angle and out.img1.shape[2] >= 3:
        out = TrainSample(hue_rotate(out.img1, angle), hue_rotate(out.img2, angle), out.truth, out.provenance)
    return out


@dataclass
class Stage:
    depth: int
    steps: int
    size_range: tuple = ((16, 20), (16, 20))
    lr: float = 1e-3

    def sample_size(self, rng):
        (hmin, wmin), (hmax, wmax) = self.size_range
        return int(rng.integers(hmin, hmax + 1)), int(rng.integers(wmin, wmax + 1))


@dataclass
class CurriculumSchedule:
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        if self.stages[0].depth != 0:
            raise ValueError("the first stage must have depth 0")
        depths = [s.depth for s in self.stages]
        if depths != sorted(depths):
            raise ValueError("stage depths must be non-decreasing")


def desk_schedule(steps=(500, 300, 150)):
    """Depth 0 -> 2 curriculum that trains the small network in a few minutes."""
    n0, n1, n2 = steps
    return CurriculumSchedule([
        Stage(0, n0, ((24, 28), (32, 40)), 2e-3),
        Stage(1, n1, ((44, 48), (56, 64)), 1e-3),
        Stage(2, n2, ((84, 84), (96, 100)), 5e-4),
    ])


@dataclass
class TrainConfig:
    mu: float = 4.0
    continuity: float = 0.5
    smoothness_sigma: float = math.inf
    max_shift: float = 8.0
    blur_sigma: float = 1.0
    mask_limit: Optional[float] = None
    crop: int = 16
    crops_per_level: int = 2
    batch_samples: int = 8
    stereo: bool = True
    augment: bool = True
    unsafe_limit: float = 0.2
    seed: int = 1234

    @property
    def effective_mask_limit(self):
        return self.mu if self.mask_limit is None else self.mask_limit


@dataclass
class EpochMetrics:
    losses: list = field(default_factory=list)
    epe: float = float("nan")
    unsafe_fraction: float = 0.0


def collect_pairs(net, sample, depth, cfg):
    """Run the recursion with the current network and record every level.

    Returns ``(pairs, final_field)`` where each pair is
    ``(img1, warped_img2, target, mask)``.
    """
    est = CNNEstimator(net, mu=cfg.mu, stereo=cfg.stereo)
    levels = []

    def keep(_depth, img1, moved, d1, _d2):
        levels.append((img1, moved, d1))

    final = register(sample.img1, sample.img2, est, RecursionConfig(max_depth=depth), on_level=keep)
    pairs = []
    for img1, moved, d1 in levels:
        target, mask = residual_target(sample.truth, d1, cfg.blur_sigma, cfg.effective_mask_limit)
        pairs.append((img1, moved, target, mask))
    return pairs, final


def _crops(net, pairs, cfg, rng):
    dh, dw = net.margins
    xs, ts, ms = [], [], []
    for img1, moved, target, mask in pairs:
        h, w = img1.shape[:2]
        ch, cw = min(cfg.crop, h), min(cfg.crop, w)
        x = network_input(img1, moved, net.margins)
        for _ in range(cfg.crops_per_level):
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            xs.append(x[y0:y0 + ch + dh, x0:x0 + cw + dw])
            ts.append(target[y0:y0 + ch, x0:x0 + cw])
            ms.append(mask[y0:y0 + ch, x0:x0 + cw])
    return xs, ts, ms


def masked_mse(pred, target, mask):
    """Mean squared error over masked pixels and its gradient w.r.t. ``pred``."""
    n = max(float(mask.sum()), 1.0)
    diff = (pred - target) * mask[..., None]
    return float((diff**2).sum() / n), (2.0 / n) * diff


def train_step(net, opt, pairs, cfg, rng):
    """One Adam update on crops drawn from ``pairs``; returns the loss."""
    xs, ts, ms = _crops(net, pairs, cfg, rng)
    n_out = net.out_channels
    loss_total, grads_total = 0.0, None
    shapes = {}
    for i, x in enumerate(xs):
        shapes.setdefault(x.shape, []).append(i)
    n_mask = max(sum(float(m.sum()) for m in ms), 1.0)
    for idx in shapes.values():
        x = np.stack([xs[i] for i in idx])
        t = np.stack([ts[i][..., :n_out] for i in idx])
        m = np.stack([ms[i] for i in idx]).astype(net.dtype)
        pred = net.forward(x, keep_cache=True, train=True)
        diff = (pred - t) * m[..., None]
        loss_total += float((diff**2).sum()) / n_mask
        grads, _ = net.backward((2.0 / n_mask) * diff)
        if grads_total is None:
            grads_total = grads
        else:
            for acc, g in zip(grads_total, grads):
                acc += g
    opt.step(net, grads_total)
    return loss_total


def train_epoch(net, samples, stage, opt, seed, cfg=None):
    """Train on ``samples`` at the stage's recursion depth.

    For every sample the recursion runs with the current network, each
    visited level becomes a training pair, and one Adam step is taken per
    ``cfg.batch_samples`` samples.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("train_epoch needs at least one sample")
    rng = make_rng(seed)
    opt.lr = stage.lr
    metrics = EpochMetrics()
    epes, unsafe = [], []
    batch, n_in_batch = [], 0
    for sample in samples:
        pairs, final = collect_pairs(net, sample, stage.depth, cfg)
        truth = sample.truth
        valid = np.all(np.isfinite(truth), axis=2) & interior_mask(np.nan_to_num(truth, posinf=0.0))
        if valid.any():
            err = np.abs(final - truth)[..., 0 if cfg.stereo else slice(None)]
            err = err if cfg.stereo else np.sqrt((err**2).sum(axis=2))
            epes.append(float(err[valid].mean()))
        unsafe.append(1.0 - float(np.mean([p[3].mean() for p in pairs])))
        batch.extend(pairs)
        n_in_batch += 1
        if n_in_batch == cfg.batch_samples:
            metrics.losses.append(train_step(net, opt, batch, cfg, rng))
            batch, n_in_batch = [], 0
    if batch:
        metrics.losses.append(train_step(net, opt, batch, cfg, rng))
    metrics.epe = float(np.mean(epes)) if epes else float("nan")
    metrics.unsafe_fraction = float(np.mean(unsafe))
    if metrics.unsafe_fraction > cfg.unsafe_limit:
        log.warning(
            "depth %d: %.0f%% of target pixels exceed the mask limit",
            stage.depth, 100 * metrics.unsafe_fraction,
        )
    return metrics


def synthetic_sample(rng, size, depth, cfg, texture_source=None):
    """Draw one synthetic training pair whose displacements fit the depth."""
    h, w = size
    limit = min(cfg.max_shift, cfg.mu * 2**depth)
    spec = DistortionSpec(
        max_magnitude=limit,
        continuity=cfg.continuity,
        smoothness_sigma=cfg.smoothness_sigma,
        stereo=cfg.stereo,
        random_magnitude=True,
    )
    img = texture_source(rng, h, w) if texture_source else random_texture(rng, h, w)
    sample = synth_distortion(img, spec, int(rng.integers(2**63)))
    if cfg.augment:
        sample = augment(sample, int(rng.integers(2**63)))
    return sample


def train(net, schedule, cfg=None, opt=None, on_step=None, dataset_samples=None):
    """Run a curriculum.

    ``on_step(record)`` receives a dict ``{step, stage, loss, epe}`` after
    every optimizer step. When ``dataset_samples`` is given, half of the
    training samples are drawn from it.
    """
    cfg = cfg or TrainConfig()
    opt = opt or Adam()
    rng = make_rng(cfg.seed)
    step = 0
    for stage_idx, stage in enumerate(schedule.stages):
        for _ in range(stage.steps):
            samples = []
            for _ in range(cfg.batch_samples):
                if dataset_samples and rng.random() < 0.5:
                    s = dataset_samples[int(rng.integers(len(dataset_samples)))]
                    s = crop_sample(s, stage.sample_size(rng), rng)
                    if cfg.augment:
                        s = augment(s, int(rng.integers(2**63)))
                    samples.append(s)
                else:
                    samples.append(synthetic_sample(rng, stage.sample_size(rng), stage.depth, cfg))
            m = train_epoch(net, samples, stage, opt, int(rng.integers(2**63)), cfg)
            step += 1
            if on_step is not None:
                on_step({"step": step, "stage": stage_idx, "loss": m.losses[-1], "epe": m.epe})
    return net, opt


def crop_sample(sample, size, rng):
    """Random crop of a dataset sample; whole sample if it is smaller."""
    h, w = sample.img1.shape[:2]
    ch, cw = min(size[0], h), min(size[1], w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
    return TrainSample(sample.img1[sl], sample.img2[sl], sample.truth[sl], sample.provenance)
