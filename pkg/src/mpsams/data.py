"""Synthetic lesion corpus, grayscale image ingestion, and dataset manifests."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_VERSION = 1


class IngestionError(ValueError):
    """An image or mask file could not be read as grayscale."""


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 64
    lesion_count: tuple[int, int] = (1, 1)
    lesion_radius: tuple[float, float] = (8.0, 16.0)
    lesion_mean: float = 0.8
    lesion_spread: float = 0.05
    background_mean: float = 0.25
    background_spread: float = 0.05
    noise: float = 0.03
    texture: Literal["flat", "speckle"] = "flat"
    speckle_looks: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "lesion_count", tuple(int(v) for v in self.lesion_count))
        object.__setattr__(self, "lesion_radius", tuple(float(v) for v in self.lesion_radius))
        lo, hi = self.lesion_count
        rlo, rhi = self.lesion_radius
        if not 1 <= lo <= hi:
            raise ValueError(f"lesion_count range {self.lesion_count} is invalid")
        if not 0 < rlo <= rhi or 2 * rhi >= self.image_size:
            raise ValueError(f"lesion_radius range {self.lesion_radius} is invalid for size {self.image_size}")
        if hi * math.pi * rhi**2 > 0.3 * self.image_size**2:
            raise ValueError("largest lesions could cover more than 30% of the image")
        if self.texture not in ("flat", "speckle"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def contrast(self) -> float:
        return abs(self.lesion_mean - self.background_mean)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _disk_mask(size: int, rng: np.random.Generator, config: SyntheticConfig) -> np.ndarray:
    lo, hi = config.lesion_count
    count = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        r = float(rng.uniform(*config.lesion_radius))
        cy, cx = rng.uniform(r, size - r, size=2)
        mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return mask


def generate_sample(config: SyntheticConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic image ``(1, H, W)`` in [0, 1] and its boolean lesion mask ``(H, W)``."""
    rng = np.random.default_rng(seed)
    size = config.image_size
    mask = _disk_mask(size, rng, config)
    lesion_level = config.lesion_mean + rng.uniform(-1, 1) * config.lesion_spread
    background_level = config.background_mean + rng.uniform(-1, 1) * config.background_spread
    img = np.where(mask, lesion_level, background_level)
    if config.texture == "speckle":
        # multiplicative gamma speckle with unit mean, as in multi-look ultrasound
        L = config.speckle_looks
        img = img * rng.gamma(L, 1.0 / L, size=img.shape)
    if config.noise:
        img = img + rng.normal(scale=config.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img[None], mask


def sample_seed(root_seed: int, index: int) -> list[int]:
    """Seed for sample ``index``; independent of how many samples are drawn."""
    return [int(root_seed), int(index)]


@dataclass
class Dataset:
    images: np.ndarray  # (M, 1, H, W) float32 in [0, 1]
    masks: np.ndarray  # (M, H, W) bool
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(len(self.images))]
        if not len(self.images) == len(self.masks) == len(self.ids):
            raise ValueError("images, masks and ids differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx])

    @classmethod
    def concat(cls, *parts: "Dataset") -> "Dataset":
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.masks for p in parts]),
            [i for p in parts for i in p.ids],
        )


def _samples(config: SyntheticConfig, count: int, seed: int, workers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # samples are independent given their derived seed; map keeps order
    def make(i):
        return generate_sample(config, sample_seed(seed, i))

    if workers <= 1:
        return [make(i) for i in range(count)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(make, range(count)))


def synthetic_corpus(config: SyntheticConfig, count: int, seed: int, workers: int = 1) -> Dataset:
    """In-memory corpus with the same per-sample seeding as :func:`generate_dataset`."""
    if count < 1:
        raise ValueError("count must be >= 1")
    pairs = _samples(config, count, seed, workers)
    return Dataset(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


@dataclass
class DatasetManifest:
    samples: list[dict]
    seed: int | None = None
    config_hash: str | None = None
    root: Path = Path(".")
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        body = {"version": self.version, "seed": self.seed, "config_hash": self.config_hash, "samples": self.samples}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        body = json.loads(path.read_text())
        ids = [s["id"] for s in body["samples"]]
        if len(set(ids)) != len(ids):
            raise IngestionError(f"{path}: duplicate sample ids")
        return cls(body["samples"], body.get("seed"), body.get("config_hash"), path.parent, body.get("version", 1))


def _to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)


def generate_dataset(config: SyntheticConfig, count: int, seed: int, out_dir: str | Path, workers: int = 1) -> DatasetManifest:
    """Write ``count`` samples as 16-bit image PNGs, {0, 255} mask PNGs and ``manifest.json``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (img, mask) in enumerate(_samples(config, count, seed, workers)):
        sid = f"{i:05d}"
        image_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
        Image.fromarray(_to_uint16(img[0])).save(out / image_rel)
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / mask_rel)
        samples.append({"id": sid, "image": image_rel, "mask": mask_rel})
    manifest = DatasetManifest(samples, seed, config.config_hash(), out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"{path}: cannot read image ({exc})") from exc
    if mode == "L":
        return arr.astype(np.float32) / 255.0
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float32) / 65535.0
    if mode == "1":
        return arr.astype(np.float32)
    raise IngestionError(f"{path}: mode {mode} is not 8/16-bit grayscale")


def center_crop(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape[-2:]
    h2, w2 = h - h % multiple, w - w % multiple
    if h2 == 0 or w2 == 0:
        raise IngestionError(f"image {h}x{w} is smaller than one {multiple}-pixel patch")
    top, left = (h - h2) // 2, (w - w2) // 2
    return img[..., top : top + h2, left : left + w2]


def load_image(path: str | Path, patch_size: int = 4) -> np.ndarray:
    """Read a grayscale PNG/PGM as ``(1, H, W)`` float32 in [0, 1], center-cropped to the patch grid."""
    img = _read_gray(Path(path))
    return center_crop(img, patch_size)[None].copy()


def load_dataset(manifest: DatasetManifest | str | Path, patch_size: int = 4) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    root = manifest.root
    missing = []
    for s in manifest.samples:
        for key in ("image", "mask"):
            if s.get(key) is not None and not (root / s[key]).exists():
                missing.append(str(root / s[key]))
    if missing:
        raise IngestionError("missing files: " + ", ".join(missing))
    images, masks = [], []
    for s in manifest.samples:
        images.append(load_image(root / s["image"], patch_size))
        if s.get("mask") is not None:
            masks.append(center_crop(_read_gray(root / s["mask"]), patch_size) >= 0.5)
        else:
            masks.append(np.zeros(images[-1].shape[1:], dtype=bool))
    return Dataset(np.stack(images), np.stack(masks), [s["id"] for s in manifest.samples])
