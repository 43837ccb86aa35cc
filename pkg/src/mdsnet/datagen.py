"""Seeded synthetic crowd scenes and the training-time augmentation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError
from .groundtruth import DotAnnotation, parse_dot_annotations, write_dot_annotations

PROFILES = {
    # count_range, blob_radius_range, min_separation
    "dense": ((10, 50), (1.5, 3.0), 2.0),
    "sparse": ((1, 12), (3.0, 6.0), 8.0),
}
MAX_RELAXATIONS = 3


@dataclass
class SceneConfig:
    size: int = 64
    count_range: tuple[int, int] | None = None
    blob_radius_range: tuple[float, float] | None = None
    noise_std: float = 0.05
    seed: int = 0
    density_profile: str = "dense"
    min_separation: float | None = None

    def __post_init__(self):
        if self.density_profile not in PROFILES:
            raise ConfigurationError(f"unknown density profile {self.density_profile!r}")
        counts, radii, sep = PROFILES[self.density_profile]
        self.count_range = tuple(self.count_range or counts)
        self.blob_radius_range = tuple(self.blob_radius_range or radii)
        if self.min_separation is None:
            self.min_separation = sep
        if self.size % 8:
            raise ConfigurationError(f"scene size {self.size} must be divisible by 8")
        for lo, hi in (self.count_range, self.blob_radius_range):
            if lo > hi:
                raise ConfigurationError(f"range ({lo}, {hi}) has min > max")
        if self.count_range[0] < 0 or self.blob_radius_range[0] <= 0:
            raise ConfigurationError("counts must be >= 0 and blob radii > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    annotation: DotAnnotation

    @property
    def image_id(self) -> str:
        return self.annotation.image_id


def _place(rng: np.random.Generator, count: int, size: int, sep: float) -> np.ndarray:
    for _ in range(MAX_RELAXATIONS + 1):
        pts: list[tuple[float, float]] = []
        attempts = 0
        while len(pts) < count and attempts < 10 * count:
            attempts += 1
            # pixel centres span [0, size - 1]; keeps horizontal flips exact
            p = rng.uniform(0.0, size - 1, size=2)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= sep * sep for q in pts):
                pts.append((float(p[0]), float(p[1])))
        if len(pts) == count:
            return np.array(pts, dtype=np.float64).reshape(-1, 2)
        sep /= 2.0
    raise ConfigurationError(f"could not place {count} heads in a {size}x{size} scene")


def generate_scene(cfg: SceneConfig, index: int) -> Sample:
    """Deterministic in (cfg.seed, index): every index draws from its own stream."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    pts = _place(rng, count, size, cfg.min_separation)
    radii = rng.uniform(*cfg.blob_radius_range, size=count)
    intensity = rng.uniform(0.4, 1.0, size=count)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = rng.uniform(0.0, 0.15)
    img = np.full((size, size), background)
    for (x, y), r, a in zip(pts, radii, intensity):
        d = np.sqrt((xx - x) ** 2 + (yy - y) ** 2)
        img = np.maximum(img, a * np.clip(1.0 - d / r, 0.0, 1.0))
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    # 8-bit levels so a PGM round trip is lossless
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    ann = DotAnnotation(f"{index:05d}", pts, (size, size))
    return Sample(img[None], ann)


def generate_dataset(cfg: SceneConfig, n_train: int, n_test: int) -> Dataset:
    samples = [generate_scene(cfg, i) for i in range(n_train + n_test)]
    ids = [s.image_id for s in samples]
    ds = Dataset(cfg, samples[:n_train], samples[n_train:], {"train": ids[:n_train], "test": ids[n_train:]})
    ds.manifest_hash = git_blob_hash(ds.manifest_text().encode())
    return ds


# ---------------------------------------------------------------- augmentation


def augment(
    sample: Sample,
    crop: int,
    rng: np.random.Generator,
    *,
    origin: tuple[int, int] | None = None,
    flip: bool | None = None,
    gamma: float | None = None,
) -> Sample:
    """Random crop (dots filtered and re-based), horizontal flip with p=0.5, gamma in [0.8, 1.25].

    Keyword arguments pin the random choices.
    """
    _, h, w = sample.image.shape
    if crop > min(h, w) or crop % 8:
        raise ConfigurationError(f"crop {crop} must be <= image side and divisible by 8")
    if origin is None:
        origin = (int(rng.integers(0, w - crop + 1)), int(rng.integers(0, h - crop + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if gamma is None:
        gamma = float(rng.uniform(0.8, 1.25))
    ox, oy = origin
    img = sample.image[:, oy : oy + crop, ox : ox + crop]
    pts = sample.annotation.points
    keep = (pts[:, 0] >= ox) & (pts[:, 0] < ox + crop) & (pts[:, 1] >= oy) & (pts[:, 1] < oy + crop)
    pts = pts[keep] - np.array([ox, oy], dtype=np.float64)
    if flip:
        img = img[:, :, ::-1]
        pts = np.column_stack([crop - 1 - pts[:, 0], pts[:, 1]])
        # heads right of the last pixel centre would land left of column 0
        pts[:, 0] = np.maximum(pts[:, 0], 0.0)
    if gamma != 1.0:
        img = np.power(img, gamma)
    ann = DotAnnotation(sample.annotation.image_id, pts, (crop, crop))
    return Sample(np.ascontiguousarray(img), ann)


# ---------------------------------------------------------------- on-disk layout


def _write_pgm(path: Path, image: np.ndarray):
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class Dataset:
    config: SceneConfig
    train: list[Sample]
    test: list[Sample]
    splits: dict[str, list[str]] = field(default_factory=dict)
    manifest_hash: str = ""

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def manifest(self) -> dict:
        return {"scene_config": self.config.to_dict(), "splits": self.splits}

    def manifest_text(self) -> str:
        return json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"

    def write(self, root) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "annotations").mkdir(parents=True, exist_ok=True)
        for s in self.train + self.test:
            _write_pgm(root / "images" / f"{s.image_id}.pgm", s.image[0])
            write_dot_annotations(root / "annotations" / f"{s.image_id}.csv", s.annotation)
        text = self.manifest_text()
        (root / "manifest.json").write_text(text)
        self.manifest_hash = git_blob_hash(text.encode())
        return root

    @classmethod
    def load(cls, root) -> Dataset:
        root = Path(root)
        mpath = root / "manifest.json"
        if not mpath.is_file():
            raise DataError(f"{mpath} not found")
        raw = mpath.read_bytes()
        try:
            manifest = json.loads(raw)
            cfg_d = dict(manifest["scene_config"])
            splits = manifest["splits"]
        except (ValueError, KeyError) as exc:
            raise DataError(f"{mpath}: malformed manifest ({exc})") from exc
        cfg = SceneConfig(**cfg_d)

        def read(ids):
            out = []
            for i in ids:
                ipath = root / "images" / f"{i}.pgm"
                if not ipath.is_file():
                    raise DataError(f"{ipath} not found")
                img = _read_pgm(ipath)
                ann = parse_dot_annotations(root / "annotations" / f"{i}.csv", img.shape, image_id=i)
                out.append(Sample(img[None], ann))
            return out

        return cls(cfg, read(splits.get("train", [])), read(splits.get("test", [])), splits, git_blob_hash(raw))


def write_dataset(cfg: SceneConfig, root, n_train: int, n_test: int) -> Dataset:
    ds = generate_dataset(cfg, n_train, n_test)
    ds.write(root)
    return ds
