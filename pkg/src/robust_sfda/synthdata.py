"""Synthetic fundus-like segmentation data with parametric domain shift.

Every image shows a bright elliptical disc containing a brighter cup over a
smooth, reddish background texture with a few dark vessels. A
:class:`DomainSpec` describes how the base render is distorted (gamma,
contrast, blur, per-channel hue offset, additive noise), so one generator
yields a labeled source domain and any number of shifted target domains.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SIZE = 128
NUM_CLASSES = 2
CLASS_NAMES = ("disc", "cup")

# 4-connected structuring element used for all edge computations.
CROSS = ndimage.generate_binary_structure(2, 1)
BOUNDARY_SIGMA = 1.0
BOUNDARY_TRUNCATE = 2.0  # gaussian support radius is round(sigma * truncate) = 2 px


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    gamma: float = 1.0
    contrast: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    hue_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not self.domain_id:
            raise ValueError("domain_id must be non-empty")
        if self.gamma <= 0 or self.contrast <= 0:
            raise ValueError(f"{self.domain_id}: gamma and contrast must be positive")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ValueError(f"{self.domain_id}: blur_sigma and noise_std must be >= 0")
        hue = tuple(float(h) for h in self.hue_shift)
        if len(hue) != 3 or any(abs(h) > 0.5 for h in hue):
            raise ValueError(f"{self.domain_id}: hue_shift must be 3 values in [-0.5, 0.5]")
        if self.seed < 0:
            raise ValueError(f"{self.domain_id}: seed must be unsigned")
        object.__setattr__(self, "hue_shift", hue)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if "hue_shift" in d:
            hs = d["hue_shift"]
            d["hue_shift"] = tuple(hs) if isinstance(hs, (list, tuple)) else (hs, hs, hs)
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hue_shift"] = list(self.hue_shift)
        return out


@dataclass
class ImageSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    sample_id: str
    domain_id: str
    mask: Optional[np.ndarray] = None  # [2, H, W] uint8, channel 0 disc, 1 cup
    boundary: Optional[np.ndarray] = None  # [2, H, W] float32 in [0, 1]

    def __post_init__(self):
        if (self.mask is None) != (self.boundary is None):
            raise ValueError("mask and boundary must be both present or both absent")

    @property
    def labeled(self) -> bool:
        return self.mask is not None


def make_boundary(mask: np.ndarray) -> np.ndarray:
    """Soft boundary map for a binary ``[K, H, W]`` mask.

    The edge band is the morphological gradient (dilation minus erosion,
    4-connected, image border treated as background), i.e. two pixels wide
    across each contour. It is smoothed with a truncated Gaussian and
    rescaled so its maximum is 1. Pixels more than 2 px from the band are
    exactly zero.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"expected [K, H, W] mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")
    out = np.zeros(mask.shape, dtype=np.float32)
    for k, m in enumerate(mask.astype(bool)):
        if not m.any():
            continue
        band = ndimage.binary_dilation(m, CROSS) & ~ndimage.binary_erosion(m, CROSS, border_value=0)
        soft = ndimage.gaussian_filter(
            band.astype(np.float64), BOUNDARY_SIGMA, mode="constant", cval=0.0, truncate=BOUNDARY_TRUNCATE
        )
        out[k] = (soft / soft.max()).astype(np.float32)
    return out


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return np.sqrt(u * u + v * v)  # < 1 inside


def _render_base(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Base (undistorted) render and hard mask for one geometry draw."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    s = size

    cy = s * (0.5 + rng.uniform(-0.08, 0.08))
    cx = s * (0.5 + rng.uniform(-0.08, 0.08))
    disc_r = s * rng.uniform(0.17, 0.25)
    disc_ry, disc_rx = disc_r * rng.uniform(0.9, 1.1), disc_r * rng.uniform(0.9, 1.1)
    disc_t = rng.uniform(0, math.pi)

    cup_scale = rng.uniform(0.4, 0.65)
    cup_ry, cup_rx = disc_ry * cup_scale, disc_rx * cup_scale * rng.uniform(0.9, 1.1)
    # offset chosen so the cup ellipse stays well inside the disc
    max_off = (1.0 - cup_scale) * disc_r * 0.35
    cup_cy = cy + rng.uniform(-max_off, max_off)
    cup_cx = cx + rng.uniform(-max_off, max_off)
    cup_t = rng.uniform(0, math.pi)

    d_disc = _ellipse(yy, xx, cy, cx, disc_ry, disc_rx, disc_t)
    d_cup = _ellipse(yy, xx, cup_cy, cup_cx, cup_ry, cup_rx, cup_t)
    disc = d_disc < 1.0
    cup = (d_cup < 1.0) & disc
    mask = np.stack([disc, cup]).astype(np.uint8)

    # soft edges in the render; the mask stays hard
    edge_w = rng.uniform(1.0, 2.5) * s / 128
    disc_soft = 1.0 / (1.0 + np.exp((d_disc - 1.0) * disc_r / edge_w))
    cup_soft = 1.0 / (1.0 + np.exp((d_cup - 1.0) * cup_scale * disc_r / edge_w)) * disc_soft

    bg_base = np.array([0.55, 0.25, 0.12]) + rng.uniform(-0.06, 0.06, 3)
    disc_col = np.array([0.85, 0.62, 0.35]) + rng.uniform(-0.05, 0.05, 3)
    cup_col = np.array([0.96, 0.85, 0.62]) + rng.uniform(-0.04, 0.04, 3)

    texture = _smooth_field(rng, s, s / 12.0)
    fine = _smooth_field(rng, s, s / 40.0)
    # radial vignetting keeps the disc region brightest on average
    r = np.sqrt((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / s
    shade = 1.0 - 0.5 * r**2

    img = bg_base[:, None, None] * shade[None] * (1.0 + 0.12 * texture[None] + 0.05 * fine[None])
    img = img * (1 - disc_soft[None]) + disc_col[:, None, None] * (1.0 + 0.06 * fine[None]) * disc_soft[None]
    img = img * (1 - cup_soft[None]) + cup_col[:, None, None] * cup_soft[None]

    # dark vessels: a few sinuous curves emerging from the disc
    vessels = np.zeros((s, s))
    for _ in range(int(rng.integers(3, 6))):
        ang = rng.uniform(0, 2 * math.pi)
        bend = rng.uniform(-0.8, 0.8)
        t = np.linspace(0.0, 1.0, 4 * s)
        rad = disc_r * 0.3 + t * s * 0.7
        a = ang + bend * t
        py, px = cy + rad * np.sin(a), cx + rad * np.cos(a)
        ok = (py >= 0) & (py < s) & (px >= 0) & (px < s)
        vessels[py[ok].astype(int), px[ok].astype(int)] = 1.0
    vessels = ndimage.gaussian_filter(vessels, max(s * 0.006, 0.5))
    vessels = np.clip(vessels / (vessels.max() + 1e-12) * 1.5, 0, 1)
    img = img * (1 - 0.45 * vessels[None])

    return np.clip(img, 0.0, 1.0), mask


def apply_domain(base: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Distort a base render: gamma, contrast, blur, hue offset, noise, clip."""
    img = np.clip(base, 0.0, 1.0) ** spec.gamma
    mean = img.mean(axis=(1, 2), keepdims=True)
    img = (img - mean) * spec.contrast + mean
    if spec.blur_sigma > 0:
        img = np.stack([ndimage.gaussian_filter(c, spec.blur_sigma, mode="reflect") for c in img])
    img = img + np.asarray(spec.hue_shift)[:, None, None]
    # always drawn so the noise field is shared across noise levels of a domain seed
    z = rng.standard_normal(img.shape)
    img = img + spec.noise_std * z
    return np.clip(img, 0.0, 1.0)


def generate_sample(
    spec: DomainSpec, index: int, labeled: bool = True, size: int = IMAGE_SIZE
) -> ImageSample:
    if index < 0:
        raise ValueError("index must be unsigned")
    geom_rng = np.random.default_rng([spec.seed, index, 0])
    base, mask = _render_base(geom_rng, size)
    img = apply_domain(base, spec, np.random.default_rng([spec.seed, index, 1]))
    sample = ImageSample(
        image=img.astype(np.float32),
        sample_id=f"{spec.domain_id}_{index:05d}",
        domain_id=spec.domain_id,
    )
    if labeled:
        sample.mask = mask
        sample.boundary = make_boundary(mask)
    return sample


def generate_dataset(
    spec: DomainSpec, n: int, labeled: bool = True, size: int = IMAGE_SIZE, start: int = 0
) -> list[ImageSample]:
    return [generate_sample(spec, start + i, labeled, size) for i in range(n)]


@dataclass
class SampleBatch:
    """Stacked tensors for a list of samples (numpy, ready for torch.from_numpy)."""

    images: np.ndarray
    masks: Optional[np.ndarray]
    boundaries: Optional[np.ndarray]
    sample_ids: list[str] = field(default_factory=list)
    domain_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample]) -> "SampleBatch":
        if not samples:
            raise ValueError("empty sample list")
        labeled = {s.labeled for s in samples}
        if len(labeled) != 1:
            raise ValueError("cannot mix labeled and unlabeled samples")
        has = labeled.pop()
        return cls(
            images=np.stack([s.image for s in samples]),
            masks=np.stack([s.mask for s in samples]) if has else None,
            boundaries=np.stack([s.boundary for s in samples]) if has else None,
            sample_ids=[s.sample_id for s in samples],
            domain_ids=[s.domain_id for s in samples],
        )

    @property
    def labeled(self) -> bool:
        return self.masks is not None

    def __len__(self) -> int:
        return len(self.images)


# -- persistence -------------------------------------------------------------


def _to_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path, optimize=False)


def save_sample(sample: ImageSample, directory: Path) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entry = {"sample_id": sample.sample_id, "domain_id": sample.domain_id, "image": f"{sample.sample_id}.png"}
    _to_png(sample.image.transpose(1, 2, 0), directory / entry["image"])
    if sample.labeled:
        entry["masks"] = {}
        for k, name in enumerate(CLASS_NAMES):
            fname = f"{sample.sample_id}_{name}.png"
            _to_png(sample.mask[k].astype(np.float32), directory / fname)
            entry["masks"][name] = fname
    (directory / f"{sample.sample_id}.json").write_text(json.dumps(entry, sort_keys=True, indent=1) + "\n")
    return entry


def save_dataset(samples: Iterable[ImageSample], directory: Path, meta: Optional[dict] = None) -> Path:
    directory = Path(directory)
    entries = [save_sample(s, directory) for s in samples]
    manifest = directory / "manifest.json"
    doc = {"meta": meta or {}, "samples": entries}
    manifest.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return manifest


def load_dataset(directory: Path, labeled: Optional[bool] = None) -> list[ImageSample]:
    """Read a dataset written by :func:`save_dataset`.

    ``labeled=False`` drops masks even when present on disk; ``None`` keeps
    whatever was saved.
    """
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        doc = json.load(fh)
    samples = []
    for e in doc["samples"]:
        with Image.open(directory / e["image"]) as im:
            image = (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()
        mask = None
        if e.get("masks") and labeled is not False:
            chans = []
            for name in CLASS_NAMES:
                with Image.open(directory / e["masks"][name]) as im:
                    chans.append((np.asarray(im) > 127).astype(np.uint8))
            mask = np.stack(chans)
        elif labeled:
            raise ValueError(f"{directory}: sample {e['sample_id']} has no masks")
        samples.append(
            ImageSample(
                image=image,
                sample_id=e["sample_id"],
                domain_id=e["domain_id"],
                mask=mask,
                boundary=make_boundary(mask) if mask is not None else None,
            )
        )
    return samples
