"""L-infinity PGD against the mask head of a segmentation model."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .losses import bce_loss, clamp_prob


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 4 / 255
    steps: int = 20
    step_size: Optional[float] = None  # None -> 2.5 * epsilon / steps
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must be in (0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and not 0 < self.step_size <= self.epsilon:
            raise ValueError("step_size must be in (0, epsilon]")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return min(self.epsilon, 2.5 * self.epsilon / max(self.steps, 1))


def mask_bce_objective(out, target: torch.Tensor) -> torch.Tensor:
    return bce_loss(clamp_prob(out.mask_prob), target)


def _ball_bounds(x0: torch.Tensor, eps: float) -> tuple[torch.Tensor, torch.Tensor]:
    # float32 rounding of x0 +/- eps can overshoot the radius by half an ulp;
    # step those entries one ulp back inside so the bound holds exactly.
    lo, hi = x0 - eps, x0 + eps
    x64 = x0.double()
    hi = torch.where(hi.double() - x64 > eps, torch.nextafter(hi, torch.full_like(hi, -1.0)), hi)
    lo = torch.where(x64 - lo.double() > eps, torch.nextafter(lo, torch.full_like(lo, 2.0)), lo)
    return lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)


def pgd_attack(
    model: torch.nn.Module,
    image: torch.Tensor,
    target: torch.Tensor,
    config: AttackConfig = AttackConfig(),
    objective: Callable = mask_bce_objective,
) -> torch.Tensor:
    """Maximise ``objective(model(x), target)`` over the epsilon-ball around ``image``.

    Works on a single ``[C, H, W]`` image or a ``[B, C, H, W]`` batch; ``target``
    must have the shape of the mask output. Model parameters are untouched
    (no gradients accumulate on them).
    """
    single = image.dim() == 3
    x0 = (image.unsqueeze(0) if single else image).detach()
    tgt = target.unsqueeze(0) if single and target.dim() == 3 else target
    if x0.shape[0] != tgt.shape[0] or x0.shape[-2:] != tgt.shape[-2:]:
        raise ValueError(f"attack target {tuple(target.shape)} does not match image {tuple(image.shape)}")
    eps, step = config.epsilon, config.alpha

    lo, hi = _ball_bounds(x0, eps)
    x = x0.clone()
    if config.random_start and config.steps > 0:
        gen = torch.Generator().manual_seed(config.seed)
        noise = torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * 2 * eps - eps
        x = torch.min(torch.max(x0 + noise, lo), hi)

    for _ in range(config.steps):
        x.requires_grad_(True)
        loss = objective(model(x), tgt)
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x + step * grad.sign()
            x = torch.min(torch.max(x, lo), hi)
        x = x.detach()

    return x.squeeze(0) if single else x


@dataclass
class AdversarialPrediction:
    sample_id: str
    domain_id: str
    adv_image: torch.Tensor
    mask_prob: torch.Tensor
    mask_gt: np.ndarray


def evaluate_adversarial(
    model: torch.nn.Module, samples: Sequence, config: AttackConfig = AttackConfig(), batch_size: int = 8
) -> list[AdversarialPrediction]:
    """Attack every labeled sample against its own ground truth and predict on the result."""
    if any(s.mask is None for s in samples):
        raise ValueError("adversarial evaluation needs labeled samples")
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = torch.from_numpy(np.stack([s.image for s in chunk]))
        y = torch.from_numpy(np.stack([s.mask for s in chunk])).float()
        cfg = AttackConfig(config.epsilon, config.steps, config.step_size, config.random_start, config.seed + start)
        x_adv = pgd_attack(model, x, y, cfg)
        with torch.no_grad():
            prob = model(x_adv).mask_prob
        for s, xa, p in zip(chunk, x_adv, prob):
            out.append(AdversarialPrediction(s.sample_id, s.domain_id, xa, p, s.mask))
    return out


def save_adversarial_png(adv_image: torch.Tensor, clean_png: Path) -> Path:
    """Write ``<stem>.adv.png`` beside the clean image file."""
    clean_png = Path(clean_png)
    path = clean_png.with_name(clean_png.stem + ".adv.png")
    arr = np.round(adv_image.detach().cpu().numpy().transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path
