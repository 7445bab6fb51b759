"""Multi-output embedding networks returning five stage feature maps."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock, ResNet

from .errors import CheckpointError, ShapeError

RESNET18_CHANNELS = (64, 64, 128, 256, 512)
TINY_DEFAULT_PLAN = (8, 16, 32, 64, 64)


class MultiScaleBackbone(nn.Module):
    """Common surface: ``forward(x)`` returns a list of five (B, C_p, H_p, W_p) maps."""

    variant: str
    channels: tuple[int, ...]

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[0] == 0:
            raise ShapeError(f"{self.variant} backbone expects a non-empty (B, 3, H, W) batch, got {tuple(x.shape)}")


class TinyBackbone(MultiScaleBackbone):
    """Five stride-2 3x3 conv + ReLU blocks; each block halves the resolution.

    At 84x84 input the stage sizes are 42, 21, 11, 6, 3.
    """

    variant = "tiny"

    def __init__(self, channel_plan: Sequence[int] = TINY_DEFAULT_PLAN, seed: int = 0):
        super().__init__()
        plan = tuple(int(c) for c in channel_plan)
        if len(plan) != 5:
            raise ValueError(f"channel_plan must have 5 entries, got {len(plan)}")
        if min(plan) < 1:
            raise ValueError(f"channel_plan entries must be >= 1, got {plan}")
        self.channels = plan
        ins = (3,) + plan[:-1]
        self.blocks = nn.ModuleList(nn.Conv2d(i, o, 3, stride=2, padding=1) for i, o in zip(ins, plan))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.blocks:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()

    def forward(self, x):
        self.check_input(x)
        stages = []
        for conv in self.blocks:
            x = F.relu(conv(x))
            stages.append(x)
        return stages


class ResNet18Backbone(ResNet, MultiScaleBackbone):
    """18-layer residual network without the classifier layer.

    Taps: stem output after max-pool, then each of the four residual stages.
    Parameter names follow the standard layout, so a stock ImageNet state
    dict (minus ``fc.*``) loads directly.
    """

    variant = "residual18"
    channels = RESNET18_CHANNELS

    def __init__(self):
        super().__init__(BasicBlock, [2, 2, 2, 2])
        del self.fc
        del self.avgpool

    def forward(self, x):
        self.check_input(x)
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        stages = [x]
        for layer in (self.layer1, self.layer2, self.layer3, self.layer4):
            x = layer(x)
            stages.append(x)
        return stages


def forward_multiscale(batch: torch.Tensor, backbone: MultiScaleBackbone) -> list[torch.Tensor]:
    return backbone(batch)


def make_tiny_backbone(channel_plan: Sequence[int] = TINY_DEFAULT_PLAN, seed: int = 0) -> TinyBackbone:
    return TinyBackbone(channel_plan, seed)


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def save_backbone(backbone: nn.Module, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(backbone.state_dict(), tmp)
    os.replace(tmp, path)


def load_pretrained(weights_file) -> ResNet18Backbone:
    """Load a residual-18 state dict (classifier weights, if present, are dropped)."""
    path = Path(weights_file)
    if not path.is_file():
        raise CheckpointError(f"pretrained weight file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read weight file {path}: {e}") from e
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items() if not k.startswith(("fc.", "module.fc."))}

    model = ResNet18Backbone()
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    bad_shape = sorted(k for k in set(expected) & set(state) if tuple(expected[k].shape) != tuple(state[k].shape))
    if missing or unexpected or bad_shape:
        parts = []
        if missing:
            parts.append(f"missing tensors: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected tensors: {', '.join(unexpected)}")
        if bad_shape:
            parts.append(f"shape mismatch: {', '.join(bad_shape)}")
        raise CheckpointError(f"{path} does not match the residual18 layout; " + "; ".join(parts))
    model.load_state_dict(state)
    return model
