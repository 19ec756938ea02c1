"""Source training, source-free target adaptation, evaluation and ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .attack import AttackConfig, evaluate_adversarial, pgd_attack
from .losses import LossWeights, clamp_prob, source_loss, target_loss
from .metrics import MetricRow, MetricsReport, aggregate, score_predictions
from .model import Checkpoint, ModelDescriptor, SegNet, clone_model, init_model
from .pseudo import FLOWS, PseudoConfig, build_supervision
from .synthdata import ImageSample, SampleBatch

log = logging.getLogger(__name__)

STAGES = ("source_standard", "source_robust", "target")

DEFAULT_AUGMENTATIONS = (
    {"name": "gaussian_noise", "sigma": 0.02},
    {"name": "contrast_adjust", "low": 0.8, "high": 1.2},
    {"name": "random_erasing", "min_area": 0.02, "max_area": 0.08},
)


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "source_standard"
    flow: Optional[str] = None
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-2
    momentum: float = 0.9
    optimizer: str = "sgd"  # or "adam"
    seed: int = 0
    weights: LossWeights = LossWeights()
    attack: AttackConfig = AttackConfig()
    augmentations: tuple = DEFAULT_AUGMENTATIONS
    pseudo: PseudoConfig = PseudoConfig()
    entropy_mode: str = "binary"
    dropout_in_training: bool = True
    descriptor: ModelDescriptor = ModelDescriptor()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if (self.flow is not None) != (self.stage == "target"):
            raise ValueError("flow must be set exactly when stage is 'target'")
        if self.flow is not None and self.flow not in FLOWS:
            raise ValueError(f"unknown flow {self.flow!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        object.__setattr__(self, "augmentations", tuple(dict(a) for a in self.augmentations))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentations"] = [dict(a) for a in self.augmentations]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "attack": AttackConfig, "pseudo": PseudoConfig, "descriptor": ModelDescriptor}
        for key, typ in nested.items():
            if isinstance(d.get(key), Mapping):
                d[key] = typ(**d[key])
        if "augmentations" in d:
            d["augmentations"] = tuple(d["augmentations"])
        return cls(**d)


# -- augmentation -------------------------------------------------------------


def augment(x: torch.Tensor, specs: Sequence[Mapping], gen: torch.Generator) -> torch.Tensor:
    """Apply the configured augmentations, in order, to a ``[B, C, H, W]`` batch."""
    x = x.clone()
    b, _, h, w = x.shape
    for spec in specs:
        name = spec["name"]
        if name == "gaussian_noise":
            x = x + spec.get("sigma", 0.02) * torch.randn(x.shape, generator=gen)
        elif name == "contrast_adjust":
            lo, hi = spec.get("low", 0.8), spec.get("high", 1.2)
            c = lo + (hi - lo) * torch.rand(b, 1, 1, 1, generator=gen)
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            x = (x - mean) * c + mean
        elif name == "random_erasing":
            lo, hi = spec.get("min_area", 0.02), spec.get("max_area", 0.08)
            u = torch.rand(b, 4, generator=gen).tolist()
            for i, (ua, ur, uy, ux) in enumerate(u):
                area = (lo + (hi - lo) * ua) * h * w
                ratio = math.exp(math.log(0.5) + (math.log(2.0) - math.log(0.5)) * ur)
                eh = max(1, min(h, int(round(math.sqrt(area * ratio)))))
                ew = max(1, min(w, int(round(math.sqrt(area / ratio)))))
                y0, x0 = int(uy * (h - eh + 1)), int(ux * (w - ew + 1))
                fill = x[i].mean(dim=(1, 2), keepdim=True)
                x[i, :, y0 : y0 + eh, x0 : x0 + ew] = fill
        else:
            raise ValueError(f"unknown augmentation {name!r}")
        x = x.clamp(0.0, 1.0)
    return x


# -- training ------------------------------------------------------------------


def _optimizer(model: SegNet, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)


def _as_batch(samples) -> SampleBatch:
    return samples if isinstance(samples, SampleBatch) else SampleBatch.from_samples(list(samples))


def train_source(samples: Sequence[ImageSample], config: TrainConfig, model: Optional[SegNet] = None) -> Checkpoint:
    """Supervised source training; the robust stage trains on clean + PGD images 1:1."""
    if config.stage not in ("source_standard", "source_robust"):
        raise ValueError(f"train_source needs a source stage, got {config.stage!r}")
    data = _as_batch(samples)
    if not data.labeled:
        raise ValueError("source training needs labeled samples")
    robust = config.stage == "source_robust"
    model = model if model is not None else init_model(config.seed, config.descriptor)
    images = torch.from_numpy(data.images)
    masks = torch.from_numpy(data.masks).float()
    bounds = torch.from_numpy(data.boundaries)
    n = len(images)
    trace: list[float] = []

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        opt = _optimizer(model, config)
        step = 0
        for epoch in range(config.epochs):
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                x = augment(images[idx], config.augmentations, gen)
                m, b = masks[idx], bounds[idx]
                if robust:
                    atk = replace(config.attack, seed=config.attack.seed + step)
                    x_adv = pgd_attack(model, x, m, atk)
                    x, m, b = torch.cat([x, x_adv]), torch.cat([m, m]), torch.cat([b, b])
                out = model(x, stochastic=config.dropout_in_training)
                loss = source_loss(clamp_prob(out.mask_prob), out.boundary, m, b)
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                opt.step()
                trace.append(float(loss.total.detach()))
                step += 1
            log.info("%s epoch %d/%d loss %.4f", config.stage, epoch + 1, config.epochs, np.mean(trace[-max(1, n // config.batch_size):]))

    role = "robust_source" if robust else "standard_source"
    return Checkpoint(model, role, config.seed, config.to_dict(), trace)


def _source_models(source_ckpts) -> tuple[Optional[SegNet], Optional[SegNet]]:
    if isinstance(source_ckpts, Mapping):
        std, rob = source_ckpts.get("standard_source"), source_ckpts.get("robust_source")
    else:
        std, rob = source_ckpts
    return (std.model if std is not None else None, rob.model if rob is not None else None)


def initial_target_model(flow: str, standard: Optional[SegNet], robust: Optional[SegNet]) -> SegNet:
    init = standard if flow == "standard" else robust
    if init is None:
        raise ValueError(f"flow {flow!r} needs the {'standard' if flow == 'standard' else 'robust'} source checkpoint")
    model = clone_model(init)
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def adapt_target(source_ckpts, samples: Sequence[ImageSample], config: TrainConfig) -> Checkpoint:
    """Source-free self-training on unlabeled target images.

    ``source_ckpts`` is a mapping ``role -> Checkpoint`` (or a pair
    ``(standard, robust)``); no source images are ever touched. Supervision
    is rebuilt from the frozen source models on clean images at the start of
    each epoch and the target model trains on augmented copies.
    """
    if config.stage != "target" or config.flow is None:
        raise ValueError("adapt_target needs stage='target' and a flow")
    data = _as_batch(samples)
    if data.labeled:
        raise ValueError("adapt_target accepts unlabeled target data only")
    standard, robust = _source_models(source_ckpts)
    target = initial_target_model(config.flow, standard, robust)
    images = torch.from_numpy(data.images)
    n = len(images)
    trace: list[float] = []

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = torch.Generator().manual_seed(config.seed)
        opt = _optimizer(target, config)
        for epoch in range(config.epochs):
            pcfg = replace(config.pseudo, seed=config.pseudo.seed + 1000 * epoch)
            sup = build_supervision(standard, robust, images, config.flow, pcfg)
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                x = augment(images[idx], config.augmentations, gen)
                out = target(x, stochastic=config.dropout_in_training)
                loss = target_loss(clamp_prob(out.mask_prob), out.boundary, sup[idx], config.weights, config.entropy_mode)
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                opt.step()
                trace.append(float(loss.total.detach()))
            log.info("adapt[%s] epoch %d/%d selected %.3f loss %.4f", config.flow, epoch + 1, config.epochs,
                     float(sup.selection_mask.mean()), np.mean(trace[-max(1, n // config.batch_size):]))

    role = "standard_target" if config.flow == "standard" else "robust_target"
    return Checkpoint(target, role, config.seed, config.to_dict(), trace)


# -- evaluation ------------------------------------------------------------------


@torch.no_grad()
def predict(model: SegNet, samples: Sequence[ImageSample], batch_size: int = 16) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch_size):
        x = torch.from_numpy(np.stack([s.image for s in samples[start : start + batch_size]]))
        out.extend(p.numpy() for p in model(x).mask_prob)
    return out


def evaluate(
    model: SegNet,
    test_sets: Mapping[str, Sequence[ImageSample]],
    attack: Optional[AttackConfig] = AttackConfig(),
    open_domains: Sequence[str] = (),
) -> MetricsReport:
    """Clean (and, if ``attack`` is given, adversarial) Dice/ASD per domain and class."""
    rows: list[MetricRow] = []
    for domain, samples in test_sets.items():
        gts = [s.mask for s in samples]
        if any(g is None for g in gts):
            raise ValueError(f"test set {domain!r} is unlabeled")
        rows += score_predictions(predict(model, samples), gts, domain, "clean")
        if attack is not None:
            adv = evaluate_adversarial(model, samples, attack)
            rows += score_predictions([a.mask_prob.numpy() for a in adv], gts, domain, "adversarial")
    return aggregate(rows, open_domains)


def ablation_weights(which: set, base: LossWeights = LossWeights()) -> LossWeights:
    unknown = set(which) - {"boundary", "entropy"}
    if unknown:
        raise ValueError(f"unknown ablation components {sorted(unknown)}")
    return LossWeights(base.alpha if "boundary" in which else 0.0, base.beta if "entropy" in which else 0.0)


def run_ablation(
    source_ckpts,
    target_train: Sequence[ImageSample],
    test_sets: Mapping[str, Sequence[ImageSample]],
    which: set,
    config: TrainConfig,
    attack: Optional[AttackConfig] = AttackConfig(),
    open_domains: Sequence[str] = (),
) -> MetricsReport:
    """Adapt with the boundary and/or entropy terms switched off, then evaluate."""
    cfg = replace(config, weights=ablation_weights(set(which), config.weights))
    ckpt = adapt_target(source_ckpts, target_train, cfg)
    return evaluate(ckpt.model, test_sets, attack, open_domains)
