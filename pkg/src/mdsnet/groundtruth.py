"""Dot annotations -> supervision targets (Gaussian density maps and binary dot maps)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .errors import ParseError, UsageError

DENSE_SIGMA = 5.0
SPARSE_SIGMA = 15.0
ADAPTIVE_BETA = 0.3
ADAPTIVE_K = 3


def default_sigma(profile: str) -> float:
    return {"dense": DENSE_SIGMA, "sparse": SPARSE_SIGMA}[profile]


@dataclass
class DotAnnotation:
    """Head positions in pixel units; x is the column, y the row."""

    image_id: str
    points: np.ndarray  # [K, 2] of (x, y)
    image_size: tuple[int, int]  # (H, W)
    rejected: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image_size
        x, y = self.points[:, 0], self.points[:, 1]
        if not (np.all((x >= 0) & (x < w)) and np.all((y >= 0) & (y < h))):
            raise UsageError(f"{self.image_id}: annotation outside the {h}x{w} image")

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    values: np.ndarray  # [H, W]
    count: float

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DotMap:
    values: np.ndarray  # [H, W] of {0, 1}
    collisions: int = 0
    dropped: int = 0

    @property
    def count(self) -> int:
        return int(self.values.sum())


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def parse_dot_annotations(path, image_size: tuple[int, int], image_id: str | None = None) -> DotAnnotation:
    """Read an ``x,y`` CSV.  Points outside the image are dropped and counted in ``rejected``."""
    path = Path(path)
    h, w = image_size
    points, rejected = [], 0
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise ParseError(f"{path}:1: expected header 'x,y'")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            x, y = float(row[0]), float(row[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric coordinate {row!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(f"{path}:{lineno}: non-finite coordinate")
        if 0 <= x < w and 0 <= y < h:
            points.append((x, y))
        else:
            rejected += 1
    return DotAnnotation(image_id or path.stem, np.array(points).reshape(-1, 2), (h, w), rejected)


def write_dot_annotations(path, ann: DotAnnotation):
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y"])
        for x, y in ann.points:
            wr.writerow([repr(float(x)), repr(float(y))])


def _splat(out: np.ndarray, x: float, y: float, sigma: float):
    """Add one unit-mass truncated Gaussian centred on (x, y)."""
    h, w = out.shape
    r = math.ceil(3.0 * sigma)
    cx, cy = int(round_half_up(x)), int(round_half_up(y))
    x0, x1 = max(cx - r, 0), min(cx + r, w - 1)
    y0, y1 = max(cy - r, 0), min(cy + r, h - 1)
    gx = np.exp(-((np.arange(x0, x1 + 1) - x) ** 2) / (2.0 * sigma * sigma))
    gy = np.exp(-((np.arange(y0, y1 + 1) - y) ** 2) / (2.0 * sigma * sigma))
    patch = np.outer(gy, gx)
    out[y0 : y1 + 1, x0 : x1 + 1] += patch / patch.sum()


def gaussian_density_map(ann: DotAnnotation, sigma: float = DENSE_SIGMA) -> DensityMap:
    if sigma <= 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    out = np.zeros(ann.image_size, dtype=np.float64)
    for x, y in ann.points:
        _splat(out, x, y, sigma)
    return DensityMap(out, float(ann.count))


def adaptive_sigmas(points: np.ndarray, beta: float = ADAPTIVE_BETA, k: int = ADAPTIVE_K, fallback: float = DENSE_SIGMA) -> np.ndarray:
    """beta * mean distance to the k nearest other heads; ``fallback`` when fewer than k others exist."""
    if beta <= 0 or k < 1:
        raise UsageError(f"adaptive kernel needs beta > 0 and k >= 1, got beta={beta}, k={k}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n <= k:
        return np.full(n, float(fallback))
    dist, _ = cKDTree(points).query(points, k=k + 1)
    sig = beta * dist[:, 1:].mean(axis=1)
    # coincident heads would give sigma 0
    return np.where(sig > 0, sig, fallback)


def adaptive_density_map(
    ann: DotAnnotation, beta: float = ADAPTIVE_BETA, k: int = ADAPTIVE_K, fallback_sigma: float = DENSE_SIGMA
) -> DensityMap:
    out = np.zeros(ann.image_size, dtype=np.float64)
    for (x, y), s in zip(ann.points, adaptive_sigmas(ann.points, beta, k, fallback_sigma)):
        _splat(out, x, y, s)
    return DensityMap(out, float(ann.count))


def dot_target_map(ann: DotAnnotation) -> DotMap:
    h, w = ann.image_size
    out = np.zeros((h, w), dtype=np.float64)
    if ann.count == 0:
        return DotMap(out)
    cols = round_half_up(ann.points[:, 0])
    rows = round_half_up(ann.points[:, 1])
    inside = (cols < w) & (rows < h)
    flat = rows[inside] * w + cols[inside]
    unique = np.unique(flat)
    out.reshape(-1)[unique] = 1.0
    return DotMap(out, collisions=int(flat.size - unique.size), dropped=int((~inside).sum()))


def export_pgm(path, values: np.ndarray):
    """8-bit PGM of ``values`` scaled so the maximum maps to 255."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    scaled = np.zeros_like(values) if peak <= 0 else np.clip(values / peak, 0.0, 1.0)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(Path(path), format="PPM")
