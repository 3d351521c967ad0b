"""Image, disparity and dataset file formats.

PFM, PPM (P6) and PGM (P5) are handled natively. PNG goes through Pillow
when it is installed. Unknown disparities are stored as ``+inf``.
"""

import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from recureg.cnn import load_checkpoint as _load_net, save_checkpoint as _save_net

log = logging.getLogger(__name__)

HOLE = np.inf


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


class _Reader:
    def __init__(self, path):
        self.path = path
        self.data = Path(path).read_bytes()
        self.pos = 0

    def token(self):
        data, n = self.data, len(self.data)
        while self.pos < n:
            if data[self.pos:self.pos + 1].isspace():
                self.pos += 1
            elif data[self.pos:self.pos + 1] == b"#":
                while self.pos < n and data[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and not data[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise FormatError(self.path, start, "unexpected end of header")
        return data[start:self.pos].decode("ascii", errors="replace"), start

    def int_token(self, what):
        tok, at = self.token()
        if not re.fullmatch(r"\d+", tok):
            raise FormatError(self.path, at, f"bad {what} {tok!r}")
        return int(tok), at

    def end_header(self):
        # exactly one whitespace byte separates header and payload
        if self.pos >= len(self.data) or not self.data[self.pos:self.pos + 1].isspace():
            raise FormatError(self.path, self.pos, "missing whitespace after header")
        self.pos += 1

    def payload(self, nbytes):
        have = len(self.data) - self.pos
        if have < nbytes:
            raise FormatError(self.path, len(self.data), f"truncated payload: need {nbytes} bytes, have {have}")
        if have > nbytes:
            raise FormatError(self.path, self.pos + nbytes, f"{have - nbytes} trailing bytes after payload")
        return self.data[self.pos:self.pos + nbytes]


def _positive(r, what):
    v, at = r.int_token(what)
    if v <= 0:
        raise FormatError(r.path, at, f"{what} must be positive, got {v}")
    return v


def read_pfm(path):
    """Read a PFM file as ``(H, W)`` (``Pf``) or ``(H, W, 3)`` (``PF``) float32.

    Rows are returned top to bottom. ``inf`` values are kept.
    """
    r = _Reader(path)
    magic, at = r.token()
    if magic not in ("Pf", "PF"):
        raise FormatError(path, at, f"bad magic {magic!r}, expected 'Pf' or 'PF'")
    w = _positive(r, "width")
    h = _positive(r, "height")
    tok, at = r.token()
    try:
        scale = float(tok)
    except ValueError:
        raise FormatError(path, at, f"bad scale {tok!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(path, at, f"scale must be finite and non-zero, got {tok!r}")
    r.end_header()
    channels = 1 if magic == "Pf" else 3
    raw = r.payload(4 * w * h * channels)
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    grid = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)[::-1]
    grid = grid.astype(np.float32)
    return grid[..., 0] if channels == 1 else grid


def write_pfm(grid, path):
    """Write a float grid as little-endian PFM (scale ``-1.0``)."""
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim == 3 and grid.shape[2] == 1:
        grid = grid[..., 0]
    if grid.ndim == 2:
        magic = "Pf"
    elif grid.ndim == 3 and grid.shape[2] == 3:
        magic = "PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {grid.shape}")
    h, w = grid.shape[:2]
    header = f"{magic}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(grid[::-1], dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def _read_pnm(path, magic_expected, channels):
    r = _Reader(path)
    magic, at = r.token()
    if magic != magic_expected:
        raise FormatError(path, at, f"bad magic {magic!r}, expected {magic_expected!r}")
    w = _positive(r, "width")
    h = _positive(r, "height")
    maxval, at = r.int_token("maxval")
    if maxval != 255:
        raise FormatError(path, at, f"unsupported maxval {maxval}; only 8-bit (255) files are supported")
    r.end_header()
    raw = r.payload(w * h * channels)
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels).astype(np.float32) / 255
    return img


def _to_bytes(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def read_ppm(path):
    """Binary P6 with maxval 255, as ``(H, W, 3)`` floats in ``[0, 1]``."""
    return _read_pnm(path, "P6", 3)


def read_pgm(path):
    """Binary P5 with maxval 255, as ``(H, W)`` floats in ``[0, 1]``."""
    return _read_pnm(path, "P5", 1)[..., 0]


def write_ppm(img, path):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img).tobytes())


def write_pgm(img, path):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(img).tobytes())


def _pil():
    try:
        from PIL import Image
    except ImportError:
        raise RuntimeError("PNG support needs Pillow: pip install 'recureg[png]'") from None
    return Image


def read_image(path):
    """Read PPM, PGM, PFM or (with Pillow) PNG into a float32 image."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".pgm":
        return read_pgm(path)
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        with _pil().open(path) as im:
            arr = np.asarray(im.convert("RGB" if im.mode not in ("L", "I;16", "I") else im.mode))
        scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
        return (arr.astype(np.float32) / scale).astype(np.float32)
    raise ValueError(f"unsupported image extension {suffix!r} for {path}")


def write_image(img, path):
    suffix = Path(path).suffix.lower()
    img = np.asarray(img)
    if suffix == ".ppm":
        write_ppm(img, path)
    elif suffix == ".pgm":
        write_pgm(img, path)
    elif suffix == ".pfm":
        write_pfm(img, path)
    elif suffix == ".png":
        arr = _to_bytes(img[..., 0] if img.ndim == 3 and img.shape[2] == 1 else img)
        _pil().fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported image extension {suffix!r} for {path}")


# 5 stops, dark blue -> teal -> green -> yellow; luminance rises monotonically
RAMP = np.array([
    [0.267, 0.005, 0.329],
    [0.230, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
], dtype=np.float32)


def render_disparity(field, range_hint=None):
    """False-color rendering of ``dx``.

    ``0`` maps to the first ramp stop and ``range_hint`` (default: 99th
    percentile of the finite ``|dx|``) to the last. Values are clipped to
    that range; non-finite pixels are black.
    """
    field = np.asarray(field, dtype=np.float64)
    dx = field[..., 0] if field.ndim == 3 else field
    finite = np.isfinite(dx)
    mag = np.abs(np.where(finite, dx, 0.0))
    if range_hint is None:
        range_hint = float(np.percentile(mag[finite], 99)) if finite.any() else 1.0
        range_hint = range_hint if range_hint > 0 else 1.0
    elif range_hint <= 0:
        raise ValueError(f"range_hint must be positive, got {range_hint}")
    t = np.clip(mag / range_hint, 0, 1) * (len(RAMP) - 1)
    lo = np.minimum(np.floor(t).astype(int), len(RAMP) - 2)
    frac = (t - lo)[..., None]
    out = (1 - frac) * RAMP[lo] + frac * RAMP[lo + 1]
    out[~finite] = 0
    return out.astype(np.float32)


@dataclass
class SceneRecord:
    name: str
    left: Path
    right: Path
    disparity: Optional[Path] = None
    ndisp: Optional[int] = None

    @property
    def supervised(self):
        return self.disparity is not None


@dataclass
class DatasetIndex:
    scenes: list = field(default_factory=list)
    problems: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)


_IMAGE_EXTS = (".ppm", ".pgm", ".png", ".pfm")


def _find(folder, stem):
    for ext in _IMAGE_EXTS:
        p = folder / (stem + ext)
        if p.is_file():
            return p
    return None


def _ndisp(folder):
    calib = folder / "calib.txt"
    if not calib.is_file():
        return None
    m = re.search(r"^\s*ndisp\s*=\s*(\d+)", calib.read_text(errors="replace"), re.MULTILINE)
    return int(m.group(1)) if m else None


def load_dataset(root):
    """Index scene folders below ``root``.

    A scene is a subdirectory with ``im0`` and ``im1`` images; ``disp0.pfm``
    is the optional left ground truth and ``calib.txt`` may carry an
    ``ndisp`` hint. Folders missing an image are skipped with a warning and
    listed in ``problems``; folders without ground truth are kept as
    unsupervised.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    index = DatasetIndex()
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        left, right = _find(folder, "im0"), _find(folder, "im1")
        missing = [n for n, p in (("im0", left), ("im1", right)) if p is None]
        disp = folder / "disp0.pfm"
        if missing:
            index.problems[folder.name] = missing
            log.warning("scene %s skipped: missing %s", folder.name, ", ".join(missing))
            continue
        if not disp.is_file():
            index.problems[folder.name] = ["disp0"]
            log.warning("scene %s has no ground truth; kept as unsupervised", folder.name)
            disp = None
        index.scenes.append(SceneRecord(folder.name, left, right, disp, _ndisp(folder)))
    return index


def load_scene(record):
    """Load ``(left, right, disparity or None)`` for a scene record."""
    left, right = read_image(record.left), read_image(record.right)
    if left.shape != right.shape:
        raise ValueError(f"scene {record.name}: image shapes differ {left.shape} vs {right.shape}")
    disp = read_pfm(record.disparity) if record.disparity else None
    if disp is not None and disp.shape != left.shape[:2]:
        raise ValueError(f"scene {record.name}: disparity {disp.shape} does not match images {left.shape[:2]}")
    return left, right, disp


def save_checkpoint(net, path):
    _save_net(net, path)


def load_checkpoint(path, seed=0):
    return _load_net(path, seed=seed)


def remove_quietly(paths):
    """Delete partially written outputs, ignoring ones that do not exist."""
    for p in paths:
        try:
            os.remove(p)
        except FileNotFoundError:
            pass
        except OSError as exc:
            print(f"warning: could not remove {p}: {exc}", file=sys.stderr)
