"""Classification network with a soft proposal layer at the tail.

backbone -> K-channel conv -> soft proposal -> spatial pooling -> linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .frames import ImageFrame
from .spn import SPConfig, SoftProposal

FAMILIES = ("tiny", "vgg_like", "resnet_like")
POOLINGS = ("sum", "avg")
# replicate padding keeps spatially constant inputs constant through the backbone
PADDING = "replicate"

# stage layouts of the reference architectures; channels per stage and convs
# (vgg) or residual blocks (resnet) per stage
PRESETS = {
    "tiny": dict(family="tiny", stage_channels=(8, 16, 32, 64), blocks=(2, 2, 2, 2), sp_channels=32),
    "vgg13": dict(family="vgg_like", stage_channels=(64, 128, 256, 512, 512), blocks=(2, 2, 2, 2, 2)),
    "vgg16": dict(family="vgg_like", stage_channels=(64, 128, 256, 512, 512), blocks=(2, 2, 3, 3, 3)),
    "resnet18": dict(family="resnet_like", stage_channels=(64, 128, 256, 512), blocks=(2, 2, 2, 2)),
    "resnet34": dict(family="resnet_like", stage_channels=(64, 128, 256, 512), blocks=(3, 4, 6, 3)),
}


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "tiny"
    stage_channels: tuple = (8, 16, 32, 64)
    blocks: tuple = (2, 2, 2, 2)
    use_batch_norm: bool = True
    sp_channels: int = 32
    pooling: str = "sum"
    in_channels: int = 1
    input_size: int = 224

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        kw.setdefault("sp_channels", 512)
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> "BackboneConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"model.family must be one of {FAMILIES}")
        if not self.stage_channels:
            raise ConfigError("model.stage_channels must be non-empty")
        if any(int(c) < 1 for c in self.stage_channels):
            raise ConfigError("model.stage_channels must be positive")
        if len(self.blocks) != len(self.stage_channels) or any(int(b) < 1 for b in self.blocks):
            raise ConfigError("model.blocks needs one positive count per stage")
        if self.sp_channels < 1:
            raise ConfigError("model.sp_channels must be >= 1")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"model.pooling must be one of {POOLINGS}")
        if self.input_size < 1 or self.in_channels < 1:
            raise ConfigError("model.input_size and model.in_channels must be positive")
        return self

    def feature_grid(self, size: Optional[int] = None) -> int:
        """Side length of the final feature grid for a square input."""
        n = self.input_size if size is None else size
        # every family halves the grid once per stage, rounding up
        for _ in self.stage_channels:
            n = math.ceil(n / 2)
        return n


def _conv_bn(cin, cout, stride, bn):
    layers = [nn.Conv2d(cin, cout, 3, stride, 1, bias=not bn, padding_mode=PADDING)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, bn):
        super().__init__()
        norm = nn.BatchNorm2d if bn else (lambda c: nn.Identity())
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=not bn, padding_mode=PADDING)
        self.bn1 = norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=not bn, padding_mode=PADDING)
        self.bn2 = norm(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=not bn), norm(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _backbone(cfg: BackboneConfig) -> tuple[nn.Sequential, int]:
    bn = cfg.use_batch_norm
    layers: list[nn.Module] = []
    cin = cfg.in_channels
    for s, (cout, n) in enumerate(zip(cfg.stage_channels, cfg.blocks)):
        cout, n = int(cout), int(n)
        if cfg.family == "resnet_like":
            for b in range(n):
                layers.append(BasicBlock(cin, cout, 2 if b == 0 else 1, bn))
                cin = cout
            continue
        if cfg.family == "vgg_like" and s > 0:
            layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
            first_stride = 1
        else:
            first_stride = 2
        for b in range(n):
            layers += _conv_bn(cin, cout, first_stride if b == 0 else 1, bn)
            cin = cout
    return nn.Sequential(*layers), cin


class SPNet(nn.Module):
    """Backbone, K-channel tail conv, soft proposal, pooling, linear head."""

    def __init__(self, cfg: BackboneConfig, num_classes: int, sp: SPConfig = SPConfig()):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.backbone, cout = _backbone(cfg)
        self.tail = nn.Sequential(*_conv_bn(cout, cfg.sp_channels, 1, cfg.use_batch_norm))
        self.sp = SoftProposal(sp)
        self.classifier = nn.Linear(cfg.sp_channels, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.tail(self.backbone(x))

    def pool(self, V: torch.Tensor) -> torch.Tensor:
        if self.cfg.pooling == "sum":
            return V.sum(dim=(-2, -1))
        return V.mean(dim=(-2, -1))

    def forward(self, x: torch.Tensor, proposal=None):
        """Return ``(logits, proposal_map)`` for a ``(B, 1, H, W)`` batch."""
        U = self.features(x)
        V, M = self.sp(U, proposal)
        return self.classifier(self.pool(V)), M


def _init_weights(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound, generator=gen)
            nn.init.zeros_(m.bias)


def build_network(cfg: BackboneConfig, num_classes: int, sp: SPConfig = SPConfig(),
                  seed: int = 0) -> SPNet:
    cfg.validate()
    try:
        sp.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    net = SPNet(cfg, num_classes, sp)
    _init_weights(net, seed)
    return net


class NetworkOutput(NamedTuple):
    scores: torch.Tensor
    proposal: torch.Tensor
    feature_dims: tuple


def frames_to_batch(frames, size: int, dtype=torch.float32) -> torch.Tensor:
    arrs = []
    for f in frames:
        px = f.pixels if isinstance(f, ImageFrame) else np.asarray(f)
        if px.shape != (size, size):
            raise ValueError(f"expected a {size}x{size} input, got {px.shape}")
        arrs.append(px)
    return torch.as_tensor(np.stack(arrs)[:, None], dtype=dtype)


@torch.no_grad()
def forward(network: SPNet, image) -> NetworkOutput:
    """Inference on one frame (or a sequence of frames).

    Puts the network in eval mode so batch norm uses running statistics.
    """
    network.eval()
    frames = image if isinstance(image, (list, tuple)) else [image]
    dtype = next(network.parameters()).dtype
    x = frames_to_batch(frames, network.cfg.input_size, dtype)
    logits, M = network(x)
    U_dims = (network.cfg.sp_channels,) + tuple(M.shape[-2:])
    if isinstance(image, (list, tuple)):
        return NetworkOutput(logits, M, U_dims)
    return NetworkOutput(logits[0], M[0], U_dims)
