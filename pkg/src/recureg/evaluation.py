"""Bad-pixel statistics for disparity estimates."""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from recureg.image_core import bilinear_sample

THRESHOLDS = (1.0, 2.0, 5.0)
POLICIES = ("all", "non_occluded")


class EmptyReportError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    """Fractions of evaluated pixels whose ``dx`` error exceeds 1, 2 and 5 px."""

    bad1: float
    bad2: float
    bad5: float
    max_error: float
    occlusion_fraction: float
    evaluated_pixels: int
    epe: float = float("nan")

    def row(self, name):
        return {"name": name, "bad1": self.bad1, "bad2": self.bad2, "bad5": self.bad5,
                "max": self.max_error, "occl": self.occlusion_fraction}


def _dx(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., 0] if a.ndim == 3 else a


def occlusion_mask(d_left, d_right, tol=1.0):
    """Left-right consistency check.

    A pixel ``x`` of the left view is occluded when
    ``|dL(x) + dR(x - dL(x))| > tol``; ``dR`` is sampled bilinearly.
    Non-finite disparities count as occluded. Returns ``(mask, fraction)``.
    """
    dl, dr = _dx(d_left), _dx(d_right)
    if dl.shape != dr.shape:
        raise ValueError(f"disparity shapes differ: {dl.shape} vs {dr.shape}")
    if tol < 0:
        raise ValueError(f"tol must be non-negative, got {tol}")
    h, w = dl.shape
    finite = np.isfinite(dl)
    dl0 = np.where(finite, dl, 0.0)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    back = bilinear_sample(np.where(np.isfinite(dr), dr, np.nan)[..., None], ys, xs - dl0)[..., 0]
    with np.errstate(invalid="ignore"):
        occluded = ~finite | ~np.isfinite(back) | (np.abs(dl0 + back) > tol)
    return occluded, float(occluded.mean())


def bad_pixel_report(pred, gt, mask_policy="all", occlusion=None, d_right=None, tol=1.0):
    """Compare ``pred[..., 0]`` (or a 2-D ``pred``) against ``gt``.

    Holes (non-finite ``gt``) are always excluded. With
    ``mask_policy="non_occluded"`` occluded pixels are dropped too; the mask
    is ``occlusion`` if given, otherwise it comes from a left-right check
    of ``pred`` against ``d_right``.

    ``occlusion_fraction`` is the share of non-hole pixels flagged occluded
    (0 when no occlusion information is available).
    """
    if mask_policy not in POLICIES:
        raise ValueError(f"mask_policy must be one of {POLICIES}, got {mask_policy!r}")
    p, g = _dx(pred), _dx(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    known = np.isfinite(g)
    if occlusion is None and d_right is not None:
        occlusion, _ = occlusion_mask(pred, d_right, tol)
    if occlusion is not None:
        occlusion = np.asarray(occlusion, dtype=bool)
        if occlusion.shape != g.shape:
            raise ValueError(f"occlusion mask {occlusion.shape} does not match {g.shape}")
        occl = float(occlusion[known].mean()) if known.any() else 0.0
    elif mask_policy == "non_occluded":
        raise ValueError("non_occluded policy needs an occlusion mask or a right-view disparity")
    else:
        occl = 0.0
    include = known if mask_policy == "all" else known & ~occlusion
    n = int(include.sum())
    if n == 0:
        raise EmptyReportError("no pixels left to evaluate")
    err = np.abs(p[include] - g[include])
    err = np.where(np.isfinite(err), err, np.inf)
    bad = [float((err > t).mean()) for t in THRESHOLDS]
    return EvalReport(bad[0], bad[1], bad[2], float(err.max()), occl, n, float(err.mean()))


def endpoint_error(pred, truth, mask=None):
    """Mean 2-D end-point error over ``mask`` and finite truth."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    ok = np.all(np.isfinite(truth), axis=-1)
    if mask is not None:
        ok &= mask
    if not ok.any():
        raise EmptyReportError("no pixels left to evaluate")
    return float(np.sqrt(((pred - truth) ** 2).sum(axis=-1))[ok].mean())


def format_table(rows):
    """Text table, one scene per line; ``rows`` is ``[(name, EvalReport)]``."""
    lines = [f"{'scene':<16} {'bad1':>7} {'bad2':>7} {'bad5':>7} {'max':>8} {'occl':>7} {'pixels':>9}"]
    for name, r in rows:
        lines.append(
            f"{name:<16} {100 * r.bad1:6.1f}% {100 * r.bad2:6.1f}% {100 * r.bad5:6.1f}% "
            f"{r.max_error:8.2f} {100 * r.occlusion_fraction:6.1f}% {r.evaluated_pixels:9d}"
        )
    return "\n".join(lines)


def write_records(rows, path):
    """JSON-lines record file: name, bad1, bad2, bad5, max, occl per scene."""
    with open(path, "w") as fh:
        for name, r in rows:
            fh.write(json.dumps(r.row(name)) + "\n")


def read_records(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def as_dict(report):
    return asdict(report)
