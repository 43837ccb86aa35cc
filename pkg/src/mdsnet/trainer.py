"""Two-stage training: pretrain SN on groundtruth reconstruction, freeze it,
then train the DME under multi-channel deep supervision.

A run directory holds ``sn.ckpt`` / ``dme.ckpt`` (named NT1 blocks),
``run_manifest.json``, ``sn_losses.csv`` / ``losses.csv`` and ``eval.json``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensorgrad as tg
from .datagen import Dataset, Sample, augment
from .errors import ConfigurationError, DataError, NumericError, UsageError
from .groundtruth import adaptive_density_map, default_sigma, dot_target_map, gaussian_density_map
from .metrics import EvalReport, count_mae_mse, psnr, ssim
from .models import ArchConfig, DensityMapEstimator, SupervisionNet, check_compatible
from .supervision import LossConfig, combined_loss, loss_dot, loss_groundtruth, supervision_loss

log = logging.getLogger(__name__)

SN_SEED_TAG = 1
DME_SEED_TAG = 2
SHUFFLE_TAG = 3


@dataclass
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    lr: float = 1e-3
    epochs_sn: int = 30
    epochs_dme: int = 30
    batch: int = 4
    seed: int = 0
    dataset: str | None = None
    checkpoint_dir: str = "runs/default"
    sigma: float | None = None  # None: 5 for dense datasets, 15 for sparse
    adaptive: bool = False
    augment: bool = True
    crop: int | None = None  # None: full image side

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if self.epochs_sn < 1 or self.epochs_dme < 1 or self.batch < 1:
            raise ConfigurationError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.arch.head_mode != self.loss.regime:
            self.arch = ArchConfig(**{**self.arch.to_dict(), "head_mode": self.loss.regime})
        if self.loss.nodes > self.arch.num_nodes:
            raise ConfigurationError(f"cannot supervise {self.loss.nodes} of {self.arch.num_nodes} decoder nodes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(**d)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray  # [B, 1, H, W]
    density: np.ndarray  # [B, 1, H, W]
    dots: np.ndarray  # [B, 1, H, W]
    counts: np.ndarray  # [B]


def resolve_sigma(cfg: RunConfig, ds: Dataset) -> float:
    return cfg.sigma if cfg.sigma is not None else default_sigma(ds.config.density_profile)


def density_target(sample: Sample, sigma: float, adaptive: bool) -> np.ndarray:
    if adaptive:
        return adaptive_density_map(sample.annotation, fallback_sigma=sigma).values
    return gaussian_density_map(sample.annotation, sigma).values


def make_batch(samples: Sequence[Sample], sigma: float, adaptive: bool) -> Batch:
    return Batch(
        [s.image_id for s in samples],
        np.stack([s.image for s in samples]),
        np.stack([density_target(s, sigma, adaptive)[None] for s in samples]),
        np.stack([dot_target_map(s.annotation).values[None] for s in samples]),
        np.array([s.annotation.count for s in samples], dtype=np.float64),
    )


def iterate_batches(cfg: RunConfig, samples: list[Sample], sigma: float, stage: int, epoch: int):
    rng = np.random.default_rng([cfg.seed, SHUFFLE_TAG, stage, epoch])
    order = rng.permutation(len(samples))
    crop = cfg.crop or samples[0].image.shape[-1]
    for lo in range(0, len(order), cfg.batch):
        chosen = [samples[i] for i in order[lo : lo + cfg.batch]]
        if cfg.augment:
            chosen = [augment(s, crop, rng) for s in chosen]
        yield make_batch(chosen, sigma, cfg.adaptive)


def sn_input(batch: Batch, regime: str) -> np.ndarray:
    return batch.dots if regime == "dot" else batch.density


# ---------------------------------------------------------------- bookkeeping


class LossLog:
    """Per-step CSV: step, main loss (L_G or L_Dot), L_F, total."""

    def __init__(self, path: Path, main_name: str):
        self.path = path
        self.fh = path.open("w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(["step", main_name, "L_F", "total"])

    def write(self, step: int, main: float, lf: float, total: float):
        self.writer.writerow([step, repr(main), repr(lf), repr(total)])

    def close(self):
        self.fh.close()


def _load_dataset(cfg: RunConfig, dataset: Dataset | None) -> Dataset:
    if dataset is not None:
        return dataset
    if not cfg.dataset:
        raise UsageError("no dataset given")
    return Dataset.load(cfg.dataset)


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint_dir) / "run_manifest.json"


def read_manifest(run_dir) -> dict:
    p = Path(run_dir) / "run_manifest.json"
    if not p.is_file():
        return {}
    return json.loads(p.read_text())


def _update_manifest(cfg: RunConfig, ds: Dataset, **sections):
    path = _manifest_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(path.parent)
    manifest.update({"config": cfg.to_dict(), "dataset_hash": ds.manifest_hash, "updated": time.strftime("%Y-%m-%dT%H:%M:%S")})
    manifest.update(sections)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _abort_nonfinite(cfg: RunConfig, stage: str, epoch: int, batch: Batch, value: float):
    dump = Path(cfg.checkpoint_dir) / f"nonfinite_{stage}.json"
    dump.write_text(json.dumps({"stage": stage, "epoch": epoch, "batch_ids": batch.ids, "loss": repr(value)}, indent=2))
    raise NumericError(f"{stage}: non-finite loss {value} at epoch {epoch}, batch {batch.ids} (details in {dump})")


def load_sn(path, arch: ArchConfig) -> SupervisionNet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"SN checkpoint {path} not found")
    sn = SupervisionNet(arch)
    sn.params.load_state(tg.load_checkpoint(path))
    return sn


def load_dme(path, arch: ArchConfig | None = None) -> DensityMapEstimator:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    if arch is None:
        manifest = read_manifest(path.parent)
        if "config" not in manifest:
            raise DataError(f"no run_manifest.json with an architecture next to {path}")
        arch = RunConfig.from_dict(manifest["config"]).arch
    dme = DensityMapEstimator(arch)
    dme.params.load_state(tg.load_checkpoint(path))
    return dme


# ---------------------------------------------------------------- stage 1


def train_sn(cfg: RunConfig, dataset: Dataset | None = None) -> Path:
    """Pretrain SN to reconstruct the density map from (groundtruth input, image)."""
    ds = _load_dataset(cfg, dataset)
    if not ds.train:
        raise UsageError("training split is empty")
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _update_manifest(cfg, ds, sn={"status": "running"})
    sigma = resolve_sigma(cfg, ds)
    sn = SupervisionNet(cfg.arch, seed=[cfg.seed, SN_SEED_TAG])
    opt = tg.Adam(sn.params, lr=cfg.lr)
    losses = LossLog(out_dir / "sn_losses.csv", "L_G")
    epoch_means, step = [], 0
    try:
        for epoch in range(cfg.epochs_sn):
            total = 0.0
            for batch in iterate_batches(cfg, ds.train, sigma, SN_SEED_TAG, epoch):
                opt.zero_grad()
                recon, _ = sn(sn_input(batch, cfg.loss.regime), batch.images)
                loss = loss_groundtruth(recon, batch.density)
                value = loss.item()
                if not math.isfinite(value):
                    _abort_nonfinite(cfg, "sn", epoch, batch, value)
                tg.backward(loss)
                opt.step()
                losses.write(step, value, 0.0, value)
                total += value * len(batch.ids)
                step += 1
            epoch_means.append(total / len(ds.train))
            log.info("sn epoch %d: L_G %.6g", epoch + 1, epoch_means[-1])
    finally:
        losses.close()
    path = out_dir / "sn.ckpt"
    tg.save_checkpoint(path, sn.params)
    _update_manifest(cfg, ds, sn={"status": "done", "epoch_losses": epoch_means, "checkpoint": path.name, "params_sha256": sn.params.digest()})
    return path


# ---------------------------------------------------------------- stage 2


def train_dme(cfg: RunConfig, sn_checkpoint=None, dataset: Dataset | None = None, evaluate: bool = True) -> Path:
    """Train the DME with the frozen SN supplying per-node supervision.

    With ``cfg.loss.nodes == 0`` no SN is needed and training reduces to the
    plain baseline objective.
    """
    ds = _load_dataset(cfg, dataset)
    if not ds.train:
        raise UsageError("training split is empty")
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lc = cfg.loss
    sn = None
    if lc.nodes > 0:
        if sn_checkpoint is None:
            raise UsageError(f"supervising {lc.nodes} nodes needs an SN checkpoint")
        sn = load_sn(sn_checkpoint, cfg.arch)
        sn.params.requires_grad_(False)
    dme = DensityMapEstimator(cfg.arch, seed=[cfg.seed, DME_SEED_TAG])
    if sn is not None:
        check_compatible(sn, dme)
    sn_digest = sn.params.digest() if sn is not None else None
    _update_manifest(cfg, ds, dme={"status": "running"})

    sigma = resolve_sigma(cfg, ds)
    opt = tg.Adam(dme.params, lr=cfg.lr)
    main_name = "L_Dot" if lc.regime == "dot" else "L_G"
    losses = LossLog(out_dir / "losses.csv", main_name)
    epoch_means, step = [], 0
    try:
        for epoch in range(cfg.epochs_dme):
            total = 0.0
            for batch in iterate_batches(cfg, ds.train, sigma, DME_SEED_TAG, epoch):
                bundle = None
                if sn is not None:
                    with tg.no_grad():
                        _, bundle = sn(sn_input(batch, lc.regime), batch.images)
                opt.zero_grad()
                out, taps = dme(batch.images)
                main = loss_dot(out, batch.dots, lc.ce_clamp) if lc.regime == "dot" else loss_groundtruth(out, batch.density)
                lf = supervision_loss(taps, bundle, lc)
                loss = combined_loss(main, lf, lc.alpha)
                value = loss.item()
                if not math.isfinite(value):
                    _abort_nonfinite(cfg, "dme", epoch, batch, value)
                tg.backward(loss)
                opt.step()
                losses.write(step, main.item(), lf.item(), value)
                total += value * len(batch.ids)
                step += 1
            epoch_means.append(total / len(ds.train))
            log.info("dme epoch %d: loss %.6g", epoch + 1, epoch_means[-1])
    finally:
        losses.close()
    if sn is not None and sn.params.digest() != sn_digest:
        raise NumericError("SN parameters changed while frozen")
    path = out_dir / "dme.ckpt"
    tg.save_checkpoint(path, dme.params)
    section = {"status": "done", "epoch_losses": epoch_means, "checkpoint": path.name, "params_sha256": dme.params.digest(), "sn_params_sha256": sn_digest}
    if evaluate and ds.test:
        report = evaluate_model(dme, ds.test, regime=lc.regime, sigma=sigma, adaptive=cfg.adaptive)
        (out_dir / "eval.json").write_text(report.to_json() + "\n")
        section["eval"] = asdict(report)
    _update_manifest(cfg, ds, dme=section)
    return path


# ---------------------------------------------------------------- evaluation


def predict_maps(model: DensityMapEstimator, images: np.ndarray, batch: int = 8) -> np.ndarray:
    outs = []
    with tg.no_grad():
        for lo in range(0, len(images), batch):
            out, _ = model(images[lo : lo + batch])
            outs.append(out.data[:, 0])
    return np.concatenate(outs)


def evaluate_model(
    model: DensityMapEstimator | str | Path | Callable[[np.ndarray], np.ndarray],
    samples: Sequence[Sample],
    regime: str = "density",
    sigma: float = 5.0,
    adaptive: bool = False,
) -> EvalReport:
    """Count errors over ``samples`` plus mean PSNR/SSIM of the maps (density regime only).

    ``model`` is a DME, a checkpoint path, or any callable mapping an image
    batch [B, 1, H, W] to maps [B, H, W].  The predicted count is the map sum.
    """
    if not samples:
        raise UsageError("cannot evaluate on an empty split")
    if isinstance(model, (str, Path)):
        model = load_dme(model)
    images = np.stack([s.image for s in samples])
    if isinstance(model, DensityMapEstimator):
        maps = predict_maps(model, images)
    else:
        maps = np.asarray(model(images), dtype=np.float64).reshape(len(samples), *images.shape[2:])
    gt_counts = [s.annotation.count for s in samples]
    mae, mse = count_mae_mse(maps.sum(axis=(1, 2)), gt_counts)
    p_val = s_val = None
    if regime == "density":
        ps, ss = [], []
        for m, s in zip(maps, samples):
            if s.annotation.count == 0:
                continue  # peak normalisation undefined for an empty scene
            g = density_target(s, sigma, adaptive)
            ps.append(psnr(m, g))
            ss.append(ssim(m, g))
        if ps:
            p_val, s_val = float(np.mean(ps)), float(np.mean(ss))
    return EvalReport(mae, mse, p_val, s_val, len(samples))


def run_ablation(cfg: RunConfig, variants: dict[str, LossConfig], dataset: Dataset) -> dict[str, EvalReport]:
    """Pretrain one SN, then train one DME per loss variant under ``checkpoint_dir/<name>``."""
    root = Path(cfg.checkpoint_dir)
    sn_path = None
    if any(v.nodes > 0 for v in variants.values()):
        sn_path = train_sn(RunConfig(**{**cfg.__dict__, "checkpoint_dir": str(root / "sn")}), dataset)
    reports = {}
    for name, lc in variants.items():
        vcfg = RunConfig(**{**cfg.__dict__, "loss": lc, "checkpoint_dir": str(root / name)})
        train_dme(vcfg, sn_path, dataset)
        reports[name] = EvalReport(**read_manifest(root / name)["dme"]["eval"])
    return reports
