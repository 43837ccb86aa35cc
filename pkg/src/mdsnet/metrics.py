"""Count errors (MAE, root-mean-square MSE) and map quality (PSNR, SSIM)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .errors import UsageError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class EvalReport:
    mae: float
    mse: float
    psnr: float | None  # +inf when every map matches exactly; None in the dot regime
    ssim: float | None
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def csv_header(self) -> str:
        return ",".join(f.name for f in fields(self))

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(["" if v is None else repr(v) for v in asdict(self).values()])
        return buf.getvalue()


def count_mae_mse(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> tuple[float, float]:
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.size == 0 or gt.size == 0:
        raise UsageError("count_mae_mse needs at least one sample")
    if pred.shape != gt.shape:
        raise UsageError(f"{pred.size} predictions vs {gt.size} groundtruth counts")
    err = gt - pred
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def _values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def _scaled_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise UsageError(f"map shapes differ: {p.shape} vs {g.shape}")
    peak = g.max()
    if peak <= 0:
        raise UsageError("groundtruth map is all zero; peak-normalised metrics are undefined")
    return p / peak, g / peak


def psnr(pred, gt) -> float:
    """PSNR in dB after dividing both maps by max(gt), so the peak is 1."""
    p, g = _scaled_pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(pred, gt, win: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over all fully-inside Gaussian windows, dynamic range 1 after max(gt) scaling."""
    p, g = _scaled_pair(pred, gt)
    if min(p.shape) < win:
        raise UsageError(f"map {p.shape} is smaller than the {win}x{win} SSIM window")
    w = gaussian_window(win, sigma)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_p, mu_g = _filter_valid(p, w), _filter_valid(g, w)
    s_pp = _filter_valid(p * p, w) - mu_p * mu_p
    s_gg = _filter_valid(g * g, w) - mu_g * mu_g
    s_pg = _filter_valid(p * g, w) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * s_pg + c2)
    den = (mu_p**2 + mu_g**2 + c1) * (s_pp + s_gg + c2)
    return float(np.mean(num / den))
