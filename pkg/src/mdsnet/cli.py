"""``mdsnet`` command line: data generation, groundtruth, training, evaluation, checks.

Exit codes: 0 success, 1 usage/configuration error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import tensorgrad as tg
from .datagen import Dataset, SceneConfig, write_dataset
from .diagnostics import MODELS, check_model
from .errors import DataError, MDSError, NumericError, UsageError
from .groundtruth import adaptive_density_map, default_sigma, dot_target_map, export_pgm, gaussian_density_map
from .trainer import RunConfig, evaluate_model, load_dme, read_manifest, train_dme, train_sn

log = logging.getLogger("mdsnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta-mode", choices=("increase", "equal", "decrease"))
    p.add_argument("--nodes", type=int, choices=range(0, 4), metavar="{0..3}")
    p.add_argument("--regime", choices=("density", "dot"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--adaptive", action="store_true", default=None)
    p.add_argument("--weighting", choices=("ca", "ew"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="epochs for the stage being run")
    p.add_argument("--batch", type=int)
    p.add_argument("--no-augment", action="store_true", default=None)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdsnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=320, help="total number of scenes")
    p.add_argument("--n-test", type=int, help="scenes in the test split (default: n/5)")
    p.add_argument("--profile", choices=("dense", "sparse"), default="dense")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-gt", help="write NT1 groundtruth maps for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--regime", choices=("density", "dot"), default="density")
    p.add_argument("--out")

    for name, helptext in (("train-sn", "pretrain SupervisionNet"), ("train-dme", "train the density estimator")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "train-dme":
            p.add_argument("--sn", help="SN checkpoint (default: <out>/sn.ckpt)")

    p = sub.add_parser("eval", help="evaluate a DME checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default: the one recorded in the run manifest)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out")

    p = sub.add_parser("grad-check", help="finite-difference check of a composite graph")
    p.add_argument("--model", choices=MODELS, default="dme")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")

    p = sub.add_parser("export-map", help="max-normalised 8-bit PGM of an NT1 map")
    p.add_argument("--src", required=True)
    p.add_argument("--out", help="destination (default: next to the source with .pgm suffix)")
    return parser


def _write_manifest(out: Path, command: str, argv: list[str], **extra):
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "argv": argv, "started": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    (out / f"{command}_manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def _run_config(args, stage: str) -> RunConfig:
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file {path} not found")
        try:
            base = json.loads(path.read_text())
        except ValueError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    loss = dict(base.pop("loss", {}))
    arch = dict(base.pop("arch", {}))
    for flag, key in (("alpha", "alpha"), ("beta_mode", "mode"), ("nodes", "nodes"), ("regime", "regime"), ("weighting", "weighting")):
        if getattr(args, flag) is not None:
            loss[key] = getattr(args, flag)
    for flag, key in (("seed", "seed"), ("sigma", "sigma"), ("adaptive", "adaptive"), ("lr", "lr"), ("batch", "batch"), ("data", "dataset"), ("out", "checkpoint_dir")):
        if getattr(args, flag) is not None:
            base[key] = getattr(args, flag)
    if args.no_augment:
        base["augment"] = False
    if args.epochs is not None:
        base["epochs_sn" if stage == "sn" else "epochs_dme"] = args.epochs
    try:
        from .models import ArchConfig
        from .supervision import LossConfig

        return RunConfig(**{**base, "loss": LossConfig(**loss), "arch": ArchConfig(**arch)})
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def cmd_gen_data(args, argv):
    out = Path(args.out)
    n_test = args.n_test if args.n_test is not None else args.n // 5
    if args.n < 1 or not 0 <= n_test <= args.n:
        raise UsageError(f"need n >= 1 and 0 <= n-test <= n (got n={args.n}, n-test={n_test})")
    cfg = SceneConfig(size=args.size, seed=args.seed, density_profile=args.profile)
    _write_manifest(out, "gen-data", argv, scene_config=cfg.to_dict())
    ds = write_dataset(cfg, out, args.n - n_test, n_test)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test scenes to {out}")


def cmd_gen_gt(args, argv):
    ds = Dataset.load(args.data)
    out = Path(args.out or Path(args.data) / "gt")
    sigma = args.sigma or default_sigma(ds.config.density_profile)
    _write_manifest(out, "gen-gt", argv, sigma=sigma, adaptive=args.adaptive, regime=args.regime)
    for s in ds.train + ds.test:
        if args.regime == "dot":
            values = dot_target_map(s.annotation).values
        elif args.adaptive:
            values = adaptive_density_map(s.annotation, fallback_sigma=sigma).values
        else:
            values = gaussian_density_map(s.annotation, sigma).values
        tg.save_nt1(out / f"{s.image_id}.nt1", values)
    print(f"wrote {len(ds.train) + len(ds.test)} maps to {out}")


def cmd_train_sn(args, argv):
    cfg = _run_config(args, "sn")
    _write_manifest(Path(cfg.checkpoint_dir), "train-sn", argv, config=cfg.to_dict())
    path = train_sn(cfg)
    print(f"SN checkpoint: {path}")


def cmd_train_dme(args, argv):
    cfg = _run_config(args, "dme")
    _write_manifest(Path(cfg.checkpoint_dir), "train-dme", argv, config=cfg.to_dict())
    sn = args.sn or (Path(cfg.checkpoint_dir) / "sn.ckpt" if cfg.loss.nodes > 0 else None)
    path = train_dme(cfg, sn)
    report = read_manifest(path.parent).get("dme", {}).get("eval")
    print(f"DME checkpoint: {path}")
    if report:
        print(json.dumps(report, sort_keys=True))


def cmd_eval(args, argv):
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise DataError(f"checkpoint {ckpt} not found")
    out = Path(args.out or ckpt.parent)
    _write_manifest(out, "eval", argv)
    manifest = read_manifest(ckpt.parent)
    if "config" not in manifest:
        raise DataError(f"no run_manifest.json next to {ckpt}")
    cfg = RunConfig.from_dict(manifest["config"])
    data = args.data or cfg.dataset
    if not data:
        raise UsageError("no dataset given and none recorded in the run manifest")
    ds = Dataset.load(data)
    sigma = cfg.sigma if cfg.sigma is not None else default_sigma(ds.config.density_profile)
    report = evaluate_model(load_dme(ckpt, cfg.arch), ds.split(args.split), cfg.loss.regime, sigma, cfg.adaptive)
    (out / "eval.json").write_text(report.to_json() + "\n")
    with (out / "eval.csv").open("w") as fh:
        fh.write(report.csv_header() + "\n" + report.to_csv_row() + "\n")
    print(report.to_json())


def cmd_grad_check(args, argv):
    out = Path(args.out) if args.out else None
    if out:
        _write_manifest(out, "grad-check", argv)
    rep = check_model(args.model, size=args.size, seed=args.seed, eps=args.eps, tol=args.tol)
    print(f"{args.model}: max_rel_err={rep.max_rel_err:.3e} checked={rep.n_checked} skipped_at_kinks={rep.n_skipped} worst={rep.worst} {'PASS' if rep.passed else 'FAIL'}")
    if out:
        (out / "grad_check.json").write_text(json.dumps({"model": args.model, **rep.__dict__}, indent=2, default=str) + "\n")
    if not rep.passed:
        raise NumericError(f"gradient check failed for {args.model}: {rep.message or f'max_rel_err {rep.max_rel_err:.3e}'}")


def cmd_export_map(args, argv):
    src = Path(args.src)
    if not src.is_file():
        raise DataError(f"{src} not found")
    dst = Path(args.out) if args.out else src.with_suffix(".pgm")
    _write_manifest(dst.parent, "export-map", argv)
    values = tg.load_nt1(src)
    values = values.reshape(values.shape[-2:]) if values.ndim > 2 else values
    if values.ndim != 2:
        raise DataError(f"{src}: expected a 2-d map, got shape {values.shape}")
    export_pgm(dst, values)
    print(f"wrote {dst}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "gen-gt": cmd_gen_gt,
    "train-sn": cmd_train_sn,
    "train-dme": cmd_train_dme,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "export-map": cmd_export_map,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, argv)
    except MDSError as exc:
        print(f"mdsnet: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"mdsnet: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
