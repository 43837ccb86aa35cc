"""Training objectives: groundtruth MSE, multi-channel feature loss, its
equal-weight variant, the combined objective and the dot cross-entropy.

All pixel reductions are sums within an image followed by a mean over the
batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .errors import ConfigurationError, UsageError
from .models import SupervisionBundle
from .tensorgrad import Tensor

BETA_MODES = ("increase", "equal", "decrease")


@dataclass
class LossConfig:
    alpha: float = 0.05
    mode: str = "increase"
    nodes: int = 3  # supervised decoder nodes, 0..M, counted back from the output
    regime: str = "density"
    weighting: str = "ca"  # "ca": SE channel weights, "ew": fixed 1/C_n
    ce_clamp: float = 1e-7

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.mode not in BETA_MODES:
            raise ConfigurationError(f"unknown beta mode {self.mode!r}")
        if self.regime not in ("density", "dot"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.weighting not in ("ca", "ew"):
            raise ConfigurationError(f"unknown channel weighting {self.weighting!r}")
        if self.nodes < 0:
            raise ConfigurationError(f"nodes must be >= 0, got {self.nodes}")
        if not 0 < self.ce_clamp < 0.5:
            raise ConfigurationError(f"ce_clamp must lie in (0, 0.5), got {self.ce_clamp}")

    def to_dict(self) -> dict:
        return asdict(self)


def beta_schedule(mode: str, m: int) -> list[float]:
    """Node weights beta_1..beta_M; node M is the one closest to the output."""
    if m < 1:
        raise ConfigurationError(f"need at least one node, got M={m}")
    if mode == "increase":
        return [1.0 / 2 ** (m - n) for n in range(1, m + 1)]
    if mode == "decrease":
        return [1.0 / 2 ** (n - 1) for n in range(1, m + 1)]
    if mode == "equal":
        return [1.0] * m
    raise ConfigurationError(f"unknown beta mode {mode!r}")


def _batched_map(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape) if arr.ndim < 4 else arr


def loss_groundtruth(output: Tensor, gt) -> Tensor:
    """Squared-error sum per image, averaged over the batch."""
    g = _batched_map(gt)
    out = output if output.data.ndim == 4 else tg.reshape(output, g.shape)
    if out.shape != g.shape:
        raise UsageError(f"output shape {out.shape} != groundtruth shape {g.shape}")
    return tg.tsum(tg.square(out - g)) * (1.0 / g.shape[0])


def _check_node(n: int, tap: Tensor, feat: np.ndarray):
    if tap.data.ndim != 4 or feat.ndim != 4:
        raise UsageError(f"node {n}: expected [N, C, H, W] tap and features, got {tap.shape} and {feat.shape}")
    if tap.shape[1] != feat.shape[1]:
        raise UsageError(f"node {n}: tap has {tap.shape[1]} channels, supervision has {feat.shape[1]}")
    if tap.shape != feat.shape:
        raise UsageError(f"node {n}, channel 1..{tap.shape[1]}: tap shape {tap.shape} != supervision shape {feat.shape}")


def _feature_loss(taps: Sequence[Tensor], features: Sequence[np.ndarray], weights: Sequence[np.ndarray], betas: Sequence[float]) -> Tensor:
    if not (len(taps) == len(features) == len(weights) == len(betas)):
        raise UsageError(f"node count mismatch: {len(taps)} taps, {len(features)} supervision maps, {len(betas)} betas")
    total: Tensor = Tensor(0.0)
    for n, (tap, feat, w, beta) in enumerate(zip(taps, features, weights, betas), start=1):
        feat = np.asarray(feat, dtype=np.float64)
        _check_node(n, tap, feat)
        w = np.broadcast_to(np.asarray(w, dtype=np.float64), tap.shape[:2])
        per_channel = tg.tsum(tg.square(tap - feat), axis=(2, 3))  # [N, C]
        total = total + tg.tsum(per_channel * w) * (beta / tap.shape[0])
    return total


def loss_features(taps: Sequence[Tensor], bundle: SupervisionBundle, betas: Sequence[float]) -> Tensor:
    """beta-weighted, SE-weighted per-channel squared error between DME taps and SN features."""
    return _feature_loss(taps, bundle.features, bundle.weights, betas)


def loss_features_ew(taps: Sequence[Tensor], features: Sequence[np.ndarray], betas: Sequence[float]) -> Tensor:
    """Same as :func:`loss_features` with every channel weight fixed to 1/C_n."""
    weights = [np.full(np.shape(f)[1], 1.0 / np.shape(f)[1]) for f in features]
    return _feature_loss(taps, features, weights, betas)


def combined_loss(l_g, l_f, alpha: float = 0.05):
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    return l_g + alpha * l_f


def loss_dot(prob: Tensor, dots, clamp: float = 1e-7) -> Tensor:
    """Binary cross-entropy summed over pixels, averaged over the batch."""
    y = _batched_map(dots)
    p = prob if prob.data.ndim == 4 else tg.reshape(prob, y.shape)
    if p.shape != y.shape:
        raise UsageError(f"probability map shape {p.shape} != dot map shape {y.shape}")
    p = tg.clip(p, clamp, 1.0 - clamp)
    ll = tg.log(p) * y + tg.log(1.0 - p) * (1.0 - y)
    return tg.tsum(ll) * (-1.0 / y.shape[0])


def active_nodes(taps: list[Tensor], bundle: SupervisionBundle, nodes: int):
    """The ``nodes`` decoder nodes nearest the output, and their share of the bundle."""
    if nodes > len(taps):
        raise ConfigurationError(f"cannot supervise {nodes} nodes, the decoder has {len(taps)}")
    if nodes == 0:
        return [], SupervisionBundle([], [])
    return taps[-nodes:], bundle.last(nodes)


def supervision_loss(taps: list[Tensor], bundle: SupervisionBundle | None, cfg: LossConfig) -> Tensor:
    """L_F over the configured nodes and channel weighting; identically 0 when no node is supervised."""
    if cfg.nodes == 0 or bundle is None:
        return Tensor(0.0)
    taps, sub = active_nodes(taps, bundle, cfg.nodes)
    betas = beta_schedule(cfg.mode, cfg.nodes)
    if cfg.weighting == "ew":
        return loss_features_ew(taps, sub.features, betas)
    return loss_features(taps, sub, betas)
