"""Pseudo-labels, pseudo-boundaries and the denoising selection mask.

All supervision comes from frozen source models run without gradients.
Uncertainty is the per-pixel standard deviation of the mask probability over
several dropout passes; the prototype test compares each pixel's feature
with the mean feature of the pseudo-foreground and pseudo-background of its
own image and class channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .model import SegNet

FLOWS = ("standard", "robust", "both")


@dataclass(frozen=True)
class PseudoConfig:
    threshold: float = 0.75
    n_passes: int = 10
    uncertainty_threshold: float = 0.05
    distance: str = "euclidean"  # or "cosine"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
        if self.n_passes < 2:
            raise ValueError("n_passes must be >= 2")
        if self.uncertainty_threshold < 0:
            raise ValueError("uncertainty_threshold must be >= 0")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass(frozen=True)
class PseudoSupervision:
    pseudo_label: torch.Tensor  # [..., K, H, W] float 0/1
    pseudo_boundary: torch.Tensor  # [..., K, H, W] in [0, 1]
    selection_mask: torch.Tensor  # [..., K, H, W] float 0/1
    threshold: float
    provenance: str  # role tag of the model that produced the labels
    seed: int = 0

    def __getitem__(self, idx) -> "PseudoSupervision":
        return replace(
            self,
            pseudo_label=self.pseudo_label[idx],
            pseudo_boundary=self.pseudo_boundary[idx],
            selection_mask=self.selection_mask[idx],
        )

    def __len__(self) -> int:
        return len(self.pseudo_label)

    @classmethod
    def concat(cls, parts: Sequence["PseudoSupervision"]) -> "PseudoSupervision":
        first = parts[0]
        return replace(
            first,
            pseudo_label=torch.cat([p.pseudo_label for p in parts]),
            pseudo_boundary=torch.cat([p.pseudo_boundary for p in parts]),
            selection_mask=torch.cat([p.selection_mask for p in parts]),
        )

    def save(self, directory: Path, stem: str) -> Path:
        """Per-channel PNGs of labels and selection mask plus a JSON sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, t in (("label", self.pseudo_label), ("select", self.selection_mask)):
            for k, chan in enumerate(t.reshape(-1, *t.shape[-2:])):
                fname = f"{stem}_{name}{k}.png"
                Image.fromarray((chan.numpy() * 255).astype(np.uint8)).save(directory / fname)
                files[f"{name}{k}"] = fname
        meta = {"threshold": self.threshold, "provenance": self.provenance, "seed": self.seed, "files": files}
        sidecar = directory / f"{stem}.json"
        sidecar.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return sidecar


def threshold_probs(prob: torch.Tensor, threshold: float) -> torch.Tensor:
    # inclusive: p == t is foreground
    return (prob >= threshold).to(torch.float32)


def _batched(image: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (image.unsqueeze(0), True) if image.dim() == 3 else (image, False)


@torch.no_grad()
def generate_pseudo_labels(source_model: SegNet, image: torch.Tensor, threshold: float = 0.75) -> torch.Tensor:
    x, single = _batched(image)
    labels = threshold_probs(source_model(x).mask_prob, threshold)
    return labels[0] if single else labels


@torch.no_grad()
def generate_pseudo_boundary(source_model: SegNet, image: torch.Tensor) -> torch.Tensor:
    x, single = _batched(image)
    b = source_model(x).boundary.detach().clone()
    return b[0] if single else b


@torch.no_grad()
def dropout_std(model: SegNet, image: torch.Tensor, n_passes: int = 10, seed: int = 0) -> torch.Tensor:
    x, single = _batched(image)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        probs = model.sample_mask_probs(x, n_passes)
    std = probs.std(dim=0)
    return std[0] if single else std


def _pixel_distance(features: torch.Tensor, proto: torch.Tensor, kind: str) -> torch.Tensor:
    # features [B, F, H, W], proto [B, F] -> [B, H, W]
    p = proto[:, :, None, None]
    if kind == "euclidean":
        return ((features - p) ** 2).sum(dim=1)
    cos = torch.nn.functional.cosine_similarity(features, p.expand_as(features), dim=1, eps=1e-12)
    return 1.0 - cos


def selection_from_stats(
    std: torch.Tensor,
    features: torch.Tensor,
    pseudo_label: torch.Tensor,
    uncertainty_threshold: float = 0.05,
    distance: str = "euclidean",
) -> torch.Tensor:
    """Selection mask from a dropout-std map and pixel features.

    ``std`` and ``pseudo_label`` are ``[B, K, H, W]``; ``features`` is
    ``[B, F, H, W]``. A pixel is kept when its std is below the threshold and
    its feature is at least as close to the prototype of its own pseudo-class
    as to the other prototype. A channel without foreground (or without
    background) pixels passes the prototype test everywhere.
    """
    feats = features.to(torch.float64)
    keep = std < uncertainty_threshold
    consistent = torch.ones_like(keep)
    for k in range(pseudo_label.shape[1]):
        fg = pseudo_label[:, k].to(torch.float64)  # [B, H, W]
        bg = 1.0 - fg
        n_fg, n_bg = fg.sum(dim=(1, 2)), bg.sum(dim=(1, 2))
        proto_fg = (feats * fg[:, None]).sum(dim=(2, 3)) / n_fg.clamp(min=1)[:, None]
        proto_bg = (feats * bg[:, None]).sum(dim=(2, 3)) / n_bg.clamp(min=1)[:, None]
        d_fg = _pixel_distance(feats, proto_fg, distance)
        d_bg = _pixel_distance(feats, proto_bg, distance)
        ok = torch.where(fg > 0, d_fg <= d_bg, d_bg <= d_fg)
        degenerate = ((n_fg == 0) | (n_bg == 0))[:, None, None]
        consistent[:, k] = ok | degenerate
    return (keep & consistent).to(torch.float32)


@torch.no_grad()
def compute_selection_mask(
    source_model: SegNet,
    image: torch.Tensor,
    pseudo_label: torch.Tensor,
    n_passes: int = 10,
    uncertainty_threshold: float = 0.05,
    seed: int = 0,
    distance: str = "euclidean",
) -> torch.Tensor:
    x, single = _batched(image)
    labels = pseudo_label.unsqueeze(0) if single else pseudo_label
    std = dropout_std(source_model, x, n_passes, seed)
    feats = source_model(x).features
    mask = selection_from_stats(std, feats, labels, uncertainty_threshold, distance)
    return mask[0] if single else mask


@torch.no_grad()
def _supervision_from(model: SegNet, x: torch.Tensor, config: PseudoConfig, provenance: str) -> PseudoSupervision:
    out = model(x)
    labels = threshold_probs(out.mask_prob, config.threshold)
    std = dropout_std(model, x, config.n_passes, config.seed)
    mask = selection_from_stats(std, out.features, labels, config.uncertainty_threshold, config.distance)
    return PseudoSupervision(labels, out.boundary.detach().clone(), mask, config.threshold, provenance, config.seed)


def supervising_model(
    flow: str, standard_source: Optional[SegNet], robust_source: Optional[SegNet]
) -> tuple[SegNet, str]:
    """The frozen model that produces pseudo-supervision for ``flow``, and its role tag."""
    if flow not in FLOWS:
        raise ValueError(f"unknown flow {flow!r}; expected one of {FLOWS}")
    if flow == "robust":
        if robust_source is None:
            raise ValueError("flow 'robust' needs the robust source model")
        return robust_source, "robust_source"
    if standard_source is None:
        raise ValueError(f"flow {flow!r} needs the standard source model")
    if flow == "both" and robust_source is None:
        raise ValueError("flow 'both' needs the robust source model")
    return standard_source, "standard_source"


def build_supervision(
    standard_source: Optional[SegNet],
    robust_source: Optional[SegNet],
    image: torch.Tensor,
    flow: str = "standard",
    config: PseudoConfig = PseudoConfig(),
    batch_size: int = 16,
) -> PseudoSupervision:
    """Pseudo-supervision for one image or a batch under an adaptation flow.

    Labels, boundaries and selection come from the standard model for the
    ``standard`` and ``both`` flows and from the robust model for ``robust``.
    """
    model, provenance = supervising_model(flow, standard_source, robust_source)
    x, single = _batched(image)
    parts = []
    for i, start in enumerate(range(0, len(x), batch_size)):
        cfg = replace(config, seed=config.seed + i)
        parts.append(_supervision_from(model, x[start : start + batch_size], cfg, provenance))
    sup = replace(PseudoSupervision.concat(parts), seed=config.seed)
    return sup[0] if single else sup
