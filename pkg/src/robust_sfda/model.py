"""Two-headed U-Net segmentation model and its checkpoint format."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ROLES = ("standard_source", "robust_source", "standard_target", "robust_target")
_MAGIC = b"SFDACKP1"


@dataclass(frozen=True)
class ModelDescriptor:
    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 16
    depth: int = 3
    dropout_rate: float = 0.3
    groups: int = 4

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")

    @property
    def downsample_factor(self) -> int:
        return 2**self.depth


class SegOutput(NamedTuple):
    mask_prob: torch.Tensor  # [B, K, H, W] in (0, 1)
    boundary: torch.Tensor  # [B, K, H, W] in [0, 1]
    features: torch.Tensor  # [B, F, H, W], input to both heads


def _block(cin: int, cout: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Small U-Net with sibling mask and boundary heads.

    Dropout sits in front of the last decoder block and is only active when
    ``forward`` is called with ``stochastic=True``; train/eval mode has no
    effect because the network uses GroupNorm.
    """

    def __init__(self, descriptor: ModelDescriptor = ModelDescriptor()):
        super().__init__()
        self.descriptor = descriptor
        d = descriptor
        widths = [d.base_width * 2**i for i in range(d.depth + 1)]
        self.encoders = nn.ModuleList(
            [_block(d.in_channels if i == 0 else widths[i - 1], widths[i], d.groups) for i in range(d.depth + 1)]
        )
        self.ups = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(d.depth))]
        )
        self.decoders = nn.ModuleList([_block(2 * widths[i], widths[i], d.groups) for i in reversed(range(d.depth))])
        self.mask_head = nn.Conv2d(d.base_width, d.num_classes, 1)
        self.boundary_head = nn.Conv2d(d.base_width, d.num_classes, 1)

    @property
    def feature_dim(self) -> int:
        return self.descriptor.base_width

    def _check_input(self, x: torch.Tensor) -> None:
        f = self.descriptor.downsample_factor
        if x.dim() != 4 or x.shape[1] != self.descriptor.in_channels:
            raise ValueError(f"expected [B, {self.descriptor.in_channels}, H, W] input, got {tuple(x.shape)}")
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}")

    def _trunk(self, x: torch.Tensor) -> torch.Tensor:
        # everything up to (not including) the dropout in front of the last decoder block
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.ups[:-1], self.decoders[:-1]):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return torch.cat([self.ups[-1](x), skips.pop()], dim=1)

    def _tail(self, h: torch.Tensor, stochastic: bool) -> SegOutput:
        h = F.dropout(h, self.descriptor.dropout_rate, training=stochastic)
        x = self.decoders[-1](h)
        return SegOutput(torch.sigmoid(self.mask_head(x)), torch.sigmoid(self.boundary_head(x)), x)

    def forward(self, x: torch.Tensor, stochastic: bool = False) -> SegOutput:
        self._check_input(x)
        return self._tail(self._trunk(x), stochastic)

    def sample_mask_probs(self, x: torch.Tensor, n_passes: int) -> torch.Tensor:
        """``[n_passes, B, K, H, W]`` mask probabilities with dropout active.

        The deterministic trunk is evaluated once and shared by all passes.
        """
        self._check_input(x)
        h = self._trunk(x)
        return torch.stack([self._tail(h, True).mask_prob for _ in range(n_passes)])


def forward(model: nn.Module, image: torch.Tensor, stochastic: bool = False) -> SegOutput:
    """Run ``model`` on a single ``[C, H, W]`` image or a ``[B, C, H, W]`` batch."""
    if image.dim() == 3:
        out = model(image.unsqueeze(0), stochastic=stochastic)
        return SegOutput(*(t.squeeze(0) for t in out))
    return model(image, stochastic=stochastic)


def init_model(seed: int, descriptor: ModelDescriptor = ModelDescriptor()) -> SegNet:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SegNet(descriptor)
    finally:
        torch.random.set_rng_state(gen_state)
    model.init_seed = seed
    return model


def clone_model(model: SegNet) -> SegNet:
    return copy.deepcopy(model)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.state_dict().values()])


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# -- checkpoint file ----------------------------------------------------------
#
# layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
# then every state_dict tensor as little-endian float32 in header order.


@dataclass
class Checkpoint:
    model: SegNet
    role: str
    seed: int = 0
    config: dict = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self, path)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = ckpt.model.state_dict()
    header = {
        "descriptor": asdict(ckpt.model.descriptor),
        "role": ckpt.role,
        "seed": ckpt.seed,
        "config": ckpt.config,
        "loss_trace": [float(x) for x in ckpt.loss_trace],
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in state.values():
            fh.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n].decode())
    flat = np.frombuffer(data, dtype="<f4", offset=12 + n)
    model = SegNet(ModelDescriptor(**header["descriptor"]))
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(flat[offset : offset + size].reshape(shape).astype(np.float32))
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: payload size mismatch")
    model.load_state_dict(state)
    model.init_seed = header["seed"]
    return Checkpoint(model, header["role"], header["seed"], header["config"], header["loss_trace"])


def maybe_load(obj: Union[Checkpoint, str, Path, None]) -> Optional[Checkpoint]:
    if obj is None or isinstance(obj, Checkpoint):
        return obj
    return load_checkpoint(obj)
