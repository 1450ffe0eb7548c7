"""Trunk registry: networks that end in a ReLU, plus their shape arithmetic.

Each registered layer carries the exact sequence of spatial ops
(convolutions and poolings) up to and including that layer, so the
output grid for any input size can be computed without running the
network. Trunks are built lazily; the vgg19 weights are an external
download performed by torchvision on first use, the tiny trunk is
seeded and self-contained.
"""

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class TraceOp:
    kind: str  # "conv" or "pool"
    kernel: int
    stride: int
    padding: int = 0


def output_grid(ops, height: int, width: int) -> tuple[int, int]:
    """Spatial size after applying every op to a height x width input."""
    for op in ops:
        height = (height + 2 * op.padding - op.kernel) // op.stride + 1
        width = (width + 2 * op.padding - op.kernel) // op.stride + 1
    return height, width


def stride_product(ops) -> int:
    total = 1
    for op in ops:
        total *= op.stride
    return total


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    ops: tuple
    build: Callable[[], nn.Module]  # eval-mode module whose output is post-ReLU


@dataclass(frozen=True)
class ModelCard:
    layers: dict
    default_layer: str


def _conv() -> TraceOp:
    return TraceOp("conv", 3, 1, 1)


def _pool() -> TraceOp:
    return TraceOp("pool", 2, 2, 0)


# -- tiny: a seeded three-conv trunk for tests and offline runs -------------

_TINY_SEED = 1163
_TINY_CHANNELS = (3, 8, 12, 16)


def _tiny_layers() -> list:
    gen = torch.Generator().manual_seed(_TINY_SEED)
    layers = []
    for i in range(3):
        conv = nn.Conv2d(_TINY_CHANNELS[i], _TINY_CHANNELS[i + 1], 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(0.2 * torch.randn(conv.weight.shape, generator=gen))
            conv.bias.copy_(0.05 * torch.randn(conv.bias.shape, generator=gen))
        layers.append(conv)
        layers.append(nn.ReLU())
        if i < 2:
            layers.append(nn.MaxPool2d(2))
    return layers


def _tiny_trunk(end: int) -> nn.Module:
    net = nn.Sequential(*_tiny_layers()[:end])
    net.eval()
    return net


# layer list: conv relu pool conv relu pool conv relu
_TINY_RELU2_OPS = (_conv(), _pool(), _conv())
_TINY_RELU3_OPS = (_conv(), _pool(), _conv(), _pool(), _conv())


# -- vgg19: last conv of blocks 4 and 5, post-ReLU --------------------------

def _vgg19_trunk(end: int) -> nn.Module:
    from torchvision.models import VGG19_Weights, vgg19

    net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[:end]
    net.eval()
    return net


def _vgg19_ops(blocks: int) -> tuple:
    per_block = (2, 2, 4, 4, 4)
    ops = []
    for b in range(blocks):
        ops.extend(_conv() for _ in range(per_block[b]))
        if b < blocks - 1:
            ops.append(_pool())
    return tuple(ops)


MODELS = {
    "tiny": ModelCard(
        layers={
            "relu2": LayerSpec(12, _TINY_RELU2_OPS, lambda: _tiny_trunk(5)),
            "relu3": LayerSpec(16, _TINY_RELU3_OPS, lambda: _tiny_trunk(8)),
        },
        default_layer="relu3",
    ),
    "vgg19": ModelCard(
        layers={
            # features[:27] ends at the ReLU after the block-4 conv stack
            "conv4_4": LayerSpec(512, _vgg19_ops(4), lambda: _vgg19_trunk(27)),
            # features[:36] ends at the ReLU after the block-5 conv stack
            "conv5_4": LayerSpec(512, _vgg19_ops(5), lambda: _vgg19_trunk(36)),
        },
        default_layer="conv5_4",
    ),
}


def layer_spec(model: str, layer: str | None) -> tuple[str, LayerSpec]:
    """Resolve (model, layer) against the registry; None picks the default."""
    card = MODELS.get(model)
    if card is None:
        raise ConfigError(f"unknown model '{model}' (have: {', '.join(sorted(MODELS))})")
    name = card.default_layer if layer is None else layer
    spec = card.layers.get(name)
    if spec is None:
        raise ConfigError(
            f"model '{model}' has no layer '{name}' (have: {', '.join(sorted(card.layers))})"
        )
    return name, spec
