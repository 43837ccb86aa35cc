"""Finite-difference checks of the composite graphs used in training."""
from __future__ import annotations

import numpy as np

from . import tensorgrad as tg
from .groundtruth import DotAnnotation, dot_target_map, gaussian_density_map
from .models import ArchConfig, DensityMapEstimator, SEState, SupervisionNet, add_se_params, se_block_forward
from .supervision import LossConfig, combined_loss, loss_dot, loss_groundtruth, supervision_loss
from .tensorgrad import GradCheckReport, ParamSet

MODELS = ("se", "sn", "dme", "objective", "dot")


def _toy_batch(size: int, n: int, seed: int):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, size, size))
    dens, dots = [], []
    for i in range(n):
        pts = rng.uniform(0, size - 1, size=(int(rng.integers(1, 6)), 2))
        ann = DotAnnotation(str(i), pts, (size, size))
        dens.append(gaussian_density_map(ann, 2.0).values[None])
        dots.append(dot_target_map(ann).values[None])
    return images, np.stack(dens), np.stack(dots)


def check_model(name: str, size: int = 16, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4, base_channels: int = 8) -> GradCheckReport:
    """Gradient check of one composite: ``se``, ``sn``, ``dme``, ``objective`` (density) or ``dot``."""
    arch = ArchConfig(base_channels=base_channels)
    images, density, dots = _toy_batch(size, 2, seed)

    if name == "se":
        rng = np.random.default_rng(seed)
        params = ParamSet()
        x = params.add("features", rng.normal(size=(2, 8, 4, 4)))
        add_se_params(params, rng, "se", 8, 4)
        probe = rng.normal(size=(2, 8, 4, 4))
        wprobe = rng.normal(size=(2, 8))
        state = SEState.from_params(params, "se")

        def f():
            scaled, w = se_block_forward(x, state)
            return tg.tsum(scaled * probe) + tg.tsum(w * wprobe)

        return tg.grad_check(f, params, eps=eps, tol=tol, seed=seed)

    if name == "sn":
        sn = SupervisionNet(arch, seed=seed)

        def f():
            recon, _ = sn(density, images)
            return loss_groundtruth(recon, density)

        return tg.grad_check(f, sn.params, eps=eps, tol=tol, seed=seed)

    dme = DensityMapEstimator(ArchConfig(**{**arch.to_dict(), "head_mode": "dot" if name == "dot" else "density"}), seed=seed + 1)
    if name == "dme":

        def f():
            out, taps = dme(images)
            return loss_groundtruth(out, density) + sum((tg.tsum(tg.square(t)) * 1e-3 for t in taps), tg.Tensor(0.0))

        return tg.grad_check(f, dme.params, eps=eps, tol=tol, seed=seed)

    if name in ("objective", "dot"):
        sn = SupervisionNet(arch, seed=seed)
        with tg.no_grad():
            _, bundle = sn(dots if name == "dot" else density, images)
        lc = LossConfig(nodes=arch.num_nodes, regime="density" if name == "objective" else "dot")

        def f():
            out, taps = dme(images)
            main = loss_dot(out, dots, lc.ce_clamp) if name == "dot" else loss_groundtruth(out, density)
            return combined_loss(main, supervision_loss(taps, bundle, lc), lc.alpha)

        return tg.grad_check(f, dme.params, eps=eps, tol=tol, seed=seed)

    raise ValueError(f"unknown model {name!r}; choose from {MODELS}")
