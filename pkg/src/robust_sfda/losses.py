"""Training objectives for source training and target self-training.

All functions take probability tensors (not logits) of matching shape,
``[K, H, W]`` or batched ``[B, K, H, W]``. Log-based losses expect the
caller to clamp probabilities away from 0 and 1 (see :func:`clamp_prob`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

PROB_EPS = 1e-6


class NoPixelsSelectedWarning(UserWarning):
    """The selection mask removed every pixel; the segmentation term is 0."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # pseudo-boundary term
    beta: float = 0.4  # entropy term

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def clamp_prob(p: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _check_binary(t: torch.Tensor, name: str) -> None:
    if not ((t == 0) | (t == 1)).all():
        raise ValueError(f"{name} must be binary")


def _bce_map(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def bce_loss(mask_prob: torch.Tensor, mask_gt: torch.Tensor) -> torch.Tensor:
    _check_same_shape(mask_prob, mask_gt)
    return _bce_map(mask_prob, mask_gt.to(mask_prob.dtype)).mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, target)
    return ((target.to(pred.dtype) - pred) ** 2).mean()


def source_loss(
    mask_prob: torch.Tensor, boundary_pred: torch.Tensor, mask_gt: torch.Tensor, boundary_gt: torch.Tensor
) -> LossValue:
    """Mask BCE plus boundary MSE, both averaged over every pixel and class."""
    _check_same_shape(mask_prob, boundary_pred, mask_gt, boundary_gt)
    _check_binary(mask_gt, "mask_gt")
    lm = bce_loss(mask_prob, mask_gt)
    lb = mse_loss(boundary_pred, boundary_gt)
    return LossValue(lm + lb, {"mask": lm, "boundary": lb})


def pseudo_seg_loss(mask_prob: torch.Tensor, pseudo_label: torch.Tensor, selection_mask: torch.Tensor) -> torch.Tensor:
    """Selection-masked BCE against pseudo-labels, averaged over selected pixels."""
    _check_same_shape(mask_prob, pseudo_label, selection_mask)
    _check_binary(pseudo_label, "pseudo_label")
    _check_binary(selection_mask, "selection_mask")
    m = selection_mask.to(mask_prob.dtype)
    # where() keeps unselected pixels out of the graph entirely, so their
    # labels cannot leak in through 0 * inf or NaN gradients
    y = torch.where(m > 0, pseudo_label.to(mask_prob.dtype), torch.zeros_like(mask_prob))
    p = torch.where(m > 0, mask_prob, torch.full_like(mask_prob, 0.5))
    n = float(m.sum())
    if n == 0:
        warnings.warn("selection mask is empty; no pixels selected", NoPixelsSelectedWarning, stacklevel=2)
    return (m * _bce_map(p, y)).sum() / max(1.0, n)


def pseudo_boundary_loss(boundary_pred: torch.Tensor, pseudo_boundary: torch.Tensor) -> torch.Tensor:
    return mse_loss(boundary_pred, pseudo_boundary)


def entropy_loss(mask_prob: torch.Tensor, mode: str = "binary") -> torch.Tensor:
    """Mean per-pixel entropy of the mask probabilities.

    ``mode="binary"`` is the two-outcome entropy ``-[p log p + (1-p) log(1-p)]``;
    ``mode="single"`` keeps only the ``-p log p`` term.
    """
    if ((mask_prob <= 0) | (mask_prob >= 1)).any():
        raise ValueError("entropy_loss needs probabilities strictly inside (0, 1); clamp first")
    h = -mask_prob * torch.log(mask_prob)
    if mode == "binary":
        h = h - (1 - mask_prob) * torch.log(1 - mask_prob)
    elif mode != "single":
        raise ValueError(f"unknown entropy mode {mode!r}")
    return h.mean()


def target_loss(
    mask_prob: torch.Tensor,
    boundary_pred: torch.Tensor,
    supervision,
    weights: LossWeights = LossWeights(),
    entropy_mode: str = "binary",
) -> LossValue:
    """``seg + alpha * boundary + beta * entropy`` for one batch.

    ``supervision`` is anything with ``pseudo_label``, ``pseudo_boundary`` and
    ``selection_mask`` tensors shaped like the predictions.
    """
    seg = pseudo_seg_loss(mask_prob, supervision.pseudo_label, supervision.selection_mask)
    bl = pseudo_boundary_loss(boundary_pred, supervision.pseudo_boundary)
    ent = entropy_loss(mask_prob, entropy_mode)
    total = seg + weights.alpha * bl + weights.beta * ent
    return LossValue(total, {"seg": seg, "boundary": bl, "entropy": ent})
