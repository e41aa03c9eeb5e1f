"""Pixel-level primitives.

Rasters are ``uint8`` numpy arrays shaped ``(height, width, channels)`` with
1 or 3 channels; binary masks are ``bool`` arrays shaped ``(height, width)``.
Boxes use inclusive integer pixel coordinates, so a single pixel has area 1.
"""

from __future__ import annotations

from collections import deque
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np


class Box(NamedTuple):
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def dilate(self, pad: int, width: int, height: int) -> "Box":
        """Grow by ``pad`` pixels on every side, clamped to a width x height raster."""
        return Box(max(0, self.x_min - pad), max(0, self.y_min - pad),
                   min(width - 1, self.x_max + pad), min(height - 1, self.y_max + pad))


class ScoredBox(NamedTuple):
    box: Box
    score: float


def check_raster(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.dtype != np.uint8 or image.ndim != 3:
        raise ValueError("raster must be a uint8 array shaped (height, width, channels)")
    if image.shape[2] not in (1, 3) or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"bad raster shape {image.shape}")
    return image


def check_box(box: Box) -> Box:
    if box.x_min < 0 or box.y_min < 0 or box.x_min > box.x_max or box.y_min > box.y_max:
        raise ValueError(f"malformed box {tuple(box)}")
    return box


# ---------------------------------------------------------------------------
# connected components

_NEIGHBOURS_8 = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """Label the 8-connected regions of ``mask`` by breadth-first search.

    Returns one ``(n, 2)`` int array of ``(x, y)`` pixel coordinates per region.
    Regions come out in row-major order of their first pixel, since seeds are
    taken by a row-major scan.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    h, w = mask.shape
    # one-pixel false border removes bounds checks from the inner loop
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    pw = w + 2
    todo = bytearray(padded.ravel().tobytes())
    offsets = [dy * pw + dx for dx, dy in _NEIGHBOURS_8]

    regions = []
    for seed in np.flatnonzero(padded.ravel()).tolist():
        if not todo[seed]:
            continue
        todo[seed] = 0
        queue = deque([seed])
        members = []
        while queue:
            p = queue.popleft()
            members.append(p)
            for off in offsets:
                q = p + off
                if todo[q]:
                    todo[q] = 0
                    queue.append(q)
        flat = np.asarray(members, dtype=np.int64)
        ys, xs = np.divmod(flat, pw)
        regions.append(np.column_stack((xs - 1, ys - 1)))
    return regions


def bounding_box(region: Iterable) -> Box:
    """Tightest box around a collection of ``(x, y)`` pixels."""
    pts = np.asarray(list(region) if not isinstance(region, np.ndarray) else region)
    if pts.size == 0:
        raise ValueError("empty region")
    pts = pts.reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    return Box(int(x0), int(y0), int(x1), int(y1))


# ---------------------------------------------------------------------------
# box geometry

def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(candidates: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (stable, so equal scores keep
    input order); a candidate is dropped when its IoU with any already-kept box
    exceeds ``iou_threshold``.
    """
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    kept: list[ScoredBox] = []
    for i in order:
        cand = candidates[i]
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# raster operations

def crop(image: np.ndarray, box: Box) -> np.ndarray:
    check_raster(image)
    check_box(box)
    h, w = image.shape[:2]
    if box.x_max >= w or box.y_max >= h:
        raise ValueError("box exceeds raster")
    return image[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1].copy()


def _axis_weights(n_src: int, n_dst: int):
    scale = n_src / n_dst
    s = (np.arange(n_dst) + 0.5) * scale - 0.5
    s = np.clip(s, 0.0, n_src - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, s - lo


def resize_bilinear(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres; rounds to the nearest sample."""
    check_raster(image)
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    h, w = image.shape[:2]
    x0, x1, fx = _axis_weights(w, out_w)
    y0, y1, fy = _axis_weights(h, out_h)
    src = image.astype(np.float64)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    out = top * (1 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM / PGM

def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {fields[0]!r}")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def write_ppm(path, image: np.ndarray) -> None:
    check_raster(image)
    if image.shape[2] != 3:
        raise ValueError("PPM needs a 3-channel raster")
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_pgm_mask(path) -> np.ndarray:
    """Read a P5 mask; samples >= 128 are cell pixels."""
    return _read_netpbm(path, b"P5")[:, :, 0] >= 128


def write_pgm_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (mask.astype(np.uint8) * 255).tobytes())
