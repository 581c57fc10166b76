"""Synthetic source dataset and corrupted-domain stream generator.

Source samples are 16x16 grayscale images of one of four shapes (circle,
square, triangle, cross) drawn at a random position and scale over a smooth
random background texture. Each sample carries the exact foreground mask of
its shape, which the saliency-split experiment uses as ground truth.

Corruptions mirror the standard benchmark families at desk scale: two noise
kinds, a blur, two digital kinds, a geometric warp and two photometric
kinds, each with a five-level severity table. Severity 0 is reserved as an
identity hook for tests. Labels and masks are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageops
from .container import load_container, save_container
from .errors import ConfigError

Array = np.ndarray

CLASS_NAMES = ("circle", "square", "triangle", "cross")

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "blur",
    "contrast",
    "pixelate",
    "elastic_like_warp",
    "brightness",
    "fog_like_haze",
)

# severity-indexed strength tables (index 0 = severity 1), tuned so the
# desk source model degrades to roughly 25-45% error at severity 5: strong
# enough to constitute a real shift, mild enough that teacher ensembles
# keep a usable correct majority for self-training
GAUSSIAN_SIGMA = (0.03, 0.06, 0.08, 0.10, 0.12)
SHOT_SCALE = (250.0, 140.0, 80.0, 50.0, 30.0)
BLUR_SIGMA = (0.40, 0.50, 0.60, 0.70, 0.85)
CONTRAST_FACTOR = (0.80, 0.70, 0.62, 0.56, 0.50)
PIXELATE_SIDE = (13, 12, 11, 10, 9)
WARP_AMPLITUDE = (0.5, 0.8, 1.1, 1.5, 1.8)
BRIGHTNESS_SHIFT = (0.06, 0.11, 0.16, 0.20, 0.25)
HAZE_BLEND = (0.15, 0.22, 0.28, 0.34, 0.40)


@dataclass
class Sample:
    image: Array  # (side, side) float64 in [0, 1]
    label: int
    foreground_mask: Array  # (side, side) bool


@dataclass
class Dataset:
    images: Array  # (n, side, side)
    labels: Array  # (n,) int64
    masks: Array  # (n, side, side) bool

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.masks[i])


@dataclass
class TargetDomain:
    kind: str
    severity: int
    data: Dataset

    @property
    def key(self) -> str:
        return f"{self.kind}@{self.severity}"


@dataclass
class DomainStream:
    source: Dataset
    targets: list[TargetDomain]
    rounds: int = 1

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("stream needs at least one target domain")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")


# ---------------------------------------------------------------------------
# shape rasterizers; each returns a boolean mask on an side x side grid


def _draw_circle(rng: np.random.Generator, side: int) -> Array:
    r = rng.uniform(0.20, 0.30) * side
    cx = rng.uniform(r + 0.5, side - r - 1.5)
    cy = rng.uniform(r + 0.5, side - r - 1.5)
    yy, xx = np.mgrid[0:side, 0:side]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _draw_square(rng: np.random.Generator, side: int) -> Array:
    half = rng.uniform(0.18, 0.27) * side
    cx = rng.uniform(half + 0.5, side - half - 1.5)
    cy = rng.uniform(half + 0.5, side - half - 1.5)
    yy, xx = np.mgrid[0:side, 0:side]
    return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)


def _draw_triangle(rng: np.random.Generator, side: int) -> Array:
    height = rng.uniform(0.45, 0.62) * side
    width = rng.uniform(0.50, 0.68) * side
    top = rng.uniform(0.5, side - height - 1.5)
    cx = rng.uniform(width / 2 + 0.5, side - width / 2 - 1.5)
    yy, xx = np.mgrid[0:side, 0:side]
    rel = (yy - top) / height
    inside_rows = (rel >= 0.0) & (rel <= 1.0)
    return inside_rows & (np.abs(xx - cx) <= rel * width / 2.0)


def _draw_cross(rng: np.random.Generator, side: int) -> Array:
    arm = rng.uniform(0.28, 0.38) * side
    thick = rng.uniform(0.08, 0.11) * side
    cx = rng.uniform(arm + 0.5, side - arm - 1.5)
    cy = rng.uniform(arm + 0.5, side - arm - 1.5)
    yy, xx = np.mgrid[0:side, 0:side]
    horiz = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)
    vert = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm)
    return horiz | vert


_SHAPES = (_draw_circle, _draw_square, _draw_triangle, _draw_cross)


def generate_source(n: int, seed: int, side: int = 16, classes: int = 4) -> Dataset:
    """Class-balanced shape dataset; deterministic given seed.

    Per-sample randomness comes from a seed sequence keyed on (seed, index),
    so samples are independent of n and safe to generate in parallel.
    """
    if classes > len(_SHAPES):
        raise ConfigError(f"at most {len(_SHAPES)} classes available")
    if n < classes:
        raise ConfigError("need at least one sample per class")
    images = np.zeros((n, side, side))
    labels = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, side, side), dtype=bool)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50, i]))
        label = i % classes
        mask = _SHAPES[label](rng, side)
        coverage = mask.mean()
        assert mask.any(), "shape raster produced an empty mask"
        assert 0.05 <= coverage <= 0.60, f"mask coverage {coverage:.3f} outside [0.05, 0.60]"
        img = imageops.smooth_field(rng, side, cells=4, lo=0.10, hi=0.38)
        img[mask] = rng.uniform(0.78, 0.95)
        img += rng.normal(0.0, 0.005, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
        masks[i] = mask
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x51])).permutation(n)
    return Dataset(images=images[order], labels=labels[order], masks=masks[order])


# ---------------------------------------------------------------------------
# corruptions


def _corrupt_image(img: Array, kind: str, severity: int, rng: np.random.Generator) -> Array:
    idx = severity - 1
    if kind == "gaussian_noise":
        return img + rng.normal(0.0, GAUSSIAN_SIGMA[idx], size=img.shape)
    if kind == "shot_noise":
        lam = SHOT_SCALE[idx]
        return rng.poisson(np.clip(img, 0.0, 1.0) * lam).astype(np.float64) / lam
    if kind == "blur":
        return imageops.gaussian_blur(img, BLUR_SIGMA[idx])
    if kind == "contrast":
        mean = img.mean()
        return (img - mean) * CONTRAST_FACTOR[idx] + mean
    if kind == "pixelate":
        small = imageops.resize_nearest(img, PIXELATE_SIDE[idx], PIXELATE_SIDE[idx])
        return imageops.resize_nearest(small, img.shape[0], img.shape[1])
    if kind == "elastic_like_warp":
        amp = WARP_AMPLITUDE[idx]
        dx = imageops.gaussian_blur(rng.normal(size=img.shape), 3.0)
        dy = imageops.gaussian_blur(rng.normal(size=img.shape), 3.0)
        dx *= amp / max(np.abs(dx).max(), 1e-9)
        dy *= amp / max(np.abs(dy).max(), 1e-9)
        return imageops.warp(img, dx, dy)
    if kind == "brightness":
        return img + BRIGHTNESS_SHIFT[idx]
    if kind == "fog_like_haze":
        t = HAZE_BLEND[idx]
        haze = imageops.smooth_field(rng, img.shape[0], cells=3, lo=0.7, hi=0.95)
        return img * (1.0 - t) + haze * t
    raise ConfigError(f"unknown corruption kind '{kind}'")


def corrupt(dataset: Dataset, kind: str, severity: int, seed: int) -> Dataset:
    """Severity-indexed corruption; labels and masks pass through unchanged.
    (kind, severity, seed) fully determines the output bytes."""
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind '{kind}'")
    if not 0 <= severity <= 5:
        raise ConfigError(f"severity must be in 0..5, got {severity}")
    if severity == 0:  # identity hook for tests
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.masks.copy())
    kind_id = CORRUPTION_KINDS.index(kind)
    images = np.empty_like(dataset.images)
    for i in range(len(dataset)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0, kind_id, severity, i]))
        images[i] = np.clip(_corrupt_image(dataset.images[i], kind, severity, rng), 0.0, 1.0)
    return Dataset(images=images, labels=dataset.labels.copy(), masks=dataset.masks.copy())


def build_stream(
    kinds,
    severity: int | list[int],
    n_per_domain: int,
    rounds: int,
    seed: int,
    *,
    side: int = 16,
    classes: int = 4,
    source: Dataset | None = None,
    source_n: int = 1200,
) -> DomainStream:
    """One corrupted dataset per (kind, severity), each derived from its own
    independently drawn clean pool so no target image repeats a source image."""
    kinds = list(kinds)
    if not kinds:
        raise ConfigError("corruption sequence must not be empty")
    severities = [severity] * len(kinds) if isinstance(severity, int) else list(severity)
    if len(severities) != len(kinds):
        raise ConfigError("severity list must match the corruption sequence")
    if source is None:
        source = generate_source(source_n, seed, side=side, classes=classes)
    targets = []
    for d_idx, (kind, sev) in enumerate(zip(kinds, severities)):
        pool_seed = seed * 10007 + 131 * (d_idx + 1)
        pool = generate_source(n_per_domain, pool_seed, side=side, classes=classes)
        targets.append(TargetDomain(kind=kind, severity=sev, data=corrupt(pool, kind, sev, pool_seed)))
    return DomainStream(source=source, targets=targets, rounds=rounds)


# ---------------------------------------------------------------------------
# dataset cache files


def save_dataset(dataset: Dataset, path: str | Path, meta: dict) -> None:
    save_container(
        path,
        "dataset",
        {**meta, "n": len(dataset), "class_names": list(CLASS_NAMES)},
        {"images": dataset.images, "labels": dataset.labels, "masks": dataset.masks},
    )


def load_dataset(path: str | Path) -> tuple[dict, Dataset]:
    header, arrays = load_container(path)
    if header["kind"] != "dataset":
        raise ConfigError(f"{path}: container kind '{header['kind']}' is not a dataset")
    return header["meta"], Dataset(
        images=arrays["images"], labels=arrays["labels"], masks=arrays["masks"]
    )


def cached_source(cache_dir: str | Path | None, n: int, seed: int, side: int, classes: int) -> Dataset:
    """Generate-or-load with a content-addressed cache file."""
    if cache_dir is None:
        return generate_source(n, seed, side=side, classes=classes)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"source_n{n}_seed{seed}_s{side}_c{classes}.bin"
    if path.exists():
        _, ds = load_dataset(path)
        return ds
    ds = generate_source(n, seed, side=side, classes=classes)
    save_dataset(ds, path, {"seed": seed, "side": side, "kind": "source", "severity": 0})
    return ds
