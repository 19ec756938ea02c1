"""Experiment configuration: one YAML document describing domains, stages and attack."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .attack import AttackConfig
from .losses import LossWeights
from .model import ModelDescriptor
from .pipeline import TrainConfig
from .pseudo import FLOWS, PseudoConfig
from .synthdata import DomainSpec

STAGE_KEYS = ("source_standard", "source_robust", "target")


@dataclass(frozen=True)
class DataSizes:
    source_train: int = 200
    target_train: int = 60  # per compound domain, unlabeled
    test: int = 40  # per compound and open domain, labeled
    test_start: int = 1000  # test indices never overlap training indices

    def __post_init__(self):
        if min(self.source_train, self.target_train, self.test) < 1 or self.test_start < 0:
            raise ValueError("dataset sizes must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    source: DomainSpec
    compound: tuple[DomainSpec, ...]
    open: tuple[DomainSpec, ...] = ()
    image_size: int = 128
    sizes: DataSizes = DataSizes()
    descriptor: ModelDescriptor = ModelDescriptor()
    stages: Mapping[str, TrainConfig] = field(default_factory=dict)
    attack: AttackConfig = AttackConfig()  # evaluation threat model
    flows: tuple[str, ...] = FLOWS
    ablation_flow: str = "standard"
    scale: float = 1.0
    seed: int = 0
    output_dir: str = "runs/default"
    name: str = "default"

    def __post_init__(self):
        if not self.compound:
            raise ValueError("at least one compound target domain is required")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"domain ids must be unique, got {ids}")
        missing = set(STAGE_KEYS) - set(self.stages)
        if missing:
            raise ValueError(f"missing stage configs: {sorted(missing)}")
        bad = [f for f in (*self.flows, self.ablation_flow) if f not in FLOWS]
        if bad:
            raise ValueError(f"unknown flows {bad}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.image_size % self.descriptor.downsample_factor:
            raise ValueError(f"image_size {self.image_size} not divisible by {self.descriptor.downsample_factor}")

    @property
    def domains(self) -> tuple[DomainSpec, ...]:
        return (self.source, *self.compound, *self.open)

    @property
    def open_ids(self) -> list[str]:
        return [d.domain_id for d in self.open]

    def _scaled(self, cfg: TrainConfig) -> TrainConfig:
        epochs = max(1, round(cfg.epochs * self.scale)) if cfg.epochs else 0
        return replace(cfg, epochs=epochs, seed=self.seed, descriptor=self.descriptor)

    def train_config(self, stage: str, flow: Optional[str] = None) -> TrainConfig:
        """Resolved config for a stage: scaled epochs, experiment seed and model shape."""
        cfg = self._scaled(self.stages[stage])
        if stage == "target":
            flow = flow or self.ablation_flow
            cfg = replace(cfg, flow=flow, pseudo=replace(cfg.pseudo, seed=self.seed))
        return cfg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "scale": self.scale,
            "image_size": self.image_size,
            "domains": {
                "source": self.source.to_dict(),
                "compound": [d.to_dict() for d in self.compound],
                "open": [d.to_dict() for d in self.open],
            },
            "sizes": asdict(self.sizes),
            "model": asdict(self.descriptor),
            "stages": {k: _stage_dict(v) for k, v in self.stages.items()},
            "attack": asdict(self.attack),
            "flows": list(self.flows),
            "ablation_flow": self.ablation_flow,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _stage_dict(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.pop("descriptor")
    d.pop("seed")
    return d


def _stage_from(key: str, raw: Mapping, weights: LossWeights, pseudo: PseudoConfig) -> TrainConfig:
    d = dict(raw)
    d["stage"] = key
    d.setdefault("weights", asdict(weights))
    d.setdefault("pseudo", asdict(pseudo))
    if key == "target":
        d["flow"] = d.get("flow", "standard")
    return TrainConfig.from_dict(d)


def from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    domains = doc.get("domains") or {}
    if "source" not in domains:
        raise ValueError("config needs domains.source")
    weights = LossWeights(**doc.get("weights", {}))
    pseudo = PseudoConfig(**doc.get("pseudo", {}))
    stages_raw = doc.get("stages") or {}
    stages = {k: _stage_from(k, stages_raw.get(k, {}), weights, pseudo) for k in STAGE_KEYS}
    extra = set(stages_raw) - set(STAGE_KEYS)
    if extra:
        raise ValueError(f"unknown stages {sorted(extra)}")
    return ExperimentConfig(
        source=DomainSpec.from_dict(domains["source"]),
        compound=tuple(DomainSpec.from_dict(d) for d in domains.get("compound") or []),
        open=tuple(DomainSpec.from_dict(d) for d in domains.get("open") or []),
        image_size=int(doc.get("image_size", 128)),
        sizes=DataSizes(**doc.get("sizes", {})),
        descriptor=ModelDescriptor(**doc.get("model", {})),
        stages=stages,
        attack=AttackConfig(**doc.get("attack", {})),
        flows=tuple(doc.get("flows", FLOWS)),
        ablation_flow=doc.get("ablation_flow", "standard"),
        scale=float(doc.get("scale", 1.0)),
        seed=int(doc.get("seed", 0)),
        output_dir=str(doc.get("output_dir", "runs/default")),
        name=str(doc.get("name", "default")),
    )


def load_config(
    path: Union[str, Path],
    *,
    seed: Optional[int] = None,
    scale: Optional[float] = None,
    attack_steps: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    """Parse a YAML experiment file and apply command-line overrides."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    cfg = from_dict(doc)
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if scale is not None:
        changes["scale"] = scale
    if attack_steps is not None:
        changes["attack"] = replace(cfg.attack, steps=attack_steps)
    if out is not None:
        changes["output_dir"] = str(out)
    return replace(cfg, **changes) if changes else cfg
