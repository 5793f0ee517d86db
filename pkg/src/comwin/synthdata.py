"""Deterministic 2D segmentation datasets made of noisy ellipses on textured ground."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import arrayio
from .arrayio import DatasetManifest, Sample

MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class SynthConfig:
    name: str = "synth"
    height: int = 64
    width: int = 64
    classes: int = 2
    objects: tuple[int, int] = (1, 3)
    radius: tuple[int, int] = (6, 16)
    # mean intensity per class, background first
    intensity: tuple[float, ...] = (0.35, 0.6)
    jitter: float = 0.08
    noise: float = 0.12
    texture: float = 0.1
    blur: float = 1.0
    fg_fraction: tuple[float, float] = (0.02, 0.5)
    samples: int = 200
    labeled_fraction: float = 0.05
    test_samples: int = 40
    seed: int = 0

    def __post_init__(self):
        for name in ("objects", "radius", "intensity", "fg_fraction"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.height < 32 or self.width < 32:
            raise ValueError("images must be at least 32x32")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if len(self.intensity) != self.classes:
            raise ValueError("need one intensity mean per class")
        lo, hi = self.objects
        if lo < 1 or hi < lo:
            raise ValueError(f"bad object count range {self.objects}")
        rlo, rhi = self.radius
        if rlo < 1 or rhi < rlo:
            raise ValueError(f"bad radius range {self.radius}")
        if 2 * rhi > min(self.height, self.width):
            raise ValueError(
                f"radius {rhi} too large for a {self.height}x{self.width} image"
            )
        if self.samples < 1 or self.test_samples < 0:
            raise ValueError("sample counts must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @property
    def n_labeled(self) -> int:
        return max(1, int(np.floor(self.labeled_fraction * self.samples + 0.5)))


def sample_seed(master: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed: SeedSequence hash of (master seed, sample index)."""
    return np.random.SeedSequence([int(master), int(index)])


def _texture(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return amplitude * field_ / 3.0


def generate_sample(config: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image f32 in [0, 1], label u8)`` for sample ``index``."""
    rng = np.random.default_rng(sample_seed(config.seed, index))
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w]
    lo, hi = config.fg_fraction
    for _ in range(MAX_PLACEMENT_TRIES):
        label = np.zeros((h, w), dtype=np.uint8)
        tint = np.zeros((h, w))
        for _ in range(rng.integers(config.objects[0], config.objects[1] + 1)):
            ry, rx = rng.uniform(config.radius[0], config.radius[1], size=2)
            cy = rng.uniform(ry, h - ry)
            cx = rng.uniform(rx, w - rx)
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            cls = rng.integers(1, config.classes)
            label[inside] = cls
            tint[inside] = config.intensity[cls] + rng.normal(0.0, config.jitter)
        frac = np.count_nonzero(label) / label.size
        if lo <= frac <= hi:
            break
    else:
        raise ValueError(f"could not place objects within fg_fraction {config.fg_fraction}")
    clean = np.where(label > 0, tint, config.intensity[0])
    if config.blur > 0:
        clean = ndimage.gaussian_filter(clean, config.blur, mode="nearest")
    image = clean + _texture(rng, h, w, config.texture) + rng.normal(0.0, config.noise, (h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def assign_splits(config: SynthConfig) -> list[str]:
    """Split tag for each of ``samples + test_samples`` indices."""
    total = config.samples + config.test_samples
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5B1D]))
    order = rng.permutation(total)
    tags = [""] * total
    for rank, idx in enumerate(order):
        if rank < config.test_samples:
            tags[idx] = "test"
        elif rank < config.test_samples + config.n_labeled:
            tags[idx] = "labeled"
        else:
            tags[idx] = "unlabeled"
    return tags


def generate_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, tag in enumerate(assign_splits(config)):
        image, label = generate_sample(config, i)
        img_rel = f"images/{i:05d}.cwt"
        lab_rel = f"labels/{i:05d}.cwt"
        arrayio.save(out / img_rel, image)
        arrayio.save(out / lab_rel, label)
        if tag == "unlabeled":
            samples.append(Sample(img_rel, tag, hidden_label=lab_rel))
        else:
            samples.append(Sample(img_rel, tag, label=lab_rel))
    manifest = DatasetManifest(
        name=config.name,
        classes=config.classes,
        samples=samples,
        seed=config.seed,
        synth_config=config.to_dict(),
        root=out,
    )
    arrayio.save_manifest(manifest, out / "manifest.json")
    return manifest


def downscale_labels(labels, factor: int):
    """Top-left nearest-neighbour subsampling over the last two axes.

    Works for numpy arrays and torch tensors alike.
    """
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dims {h}x{w} not divisible by {factor}")
    return labels[..., ::factor, ::factor]
