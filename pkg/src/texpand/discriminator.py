"""Configurable-depth PatchGAN discriminator.

``L`` convolutions of kernel 4: the first ``L - 2`` use stride 2, the last
two stride 1. Channels start at ``base_channels`` and double per layer up to
``channel_cap``. A 1x1 convolution and a sigmoid turn each descriptor into a
real/fake probability, giving a grid of overlapping patch verdicts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ImageError, SpecError
from .generator import as_torch_generator, init_weights
from .receptive import Layer, input_window
from .receptive import receptive_field as _rf

MIN_LAYERS, MAX_LAYERS = 3, 8


@dataclass(frozen=True)
class DiscriminatorSpec:
    num_conv_layers: int = 6
    base_channels: int = 64
    channel_cap: int = 512
    kernel: int = 4
    batch_norm: bool = True
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not MIN_LAYERS <= self.num_conv_layers <= MAX_LAYERS:
            raise SpecError(
                f"num_conv_layers must lie in [{MIN_LAYERS}, {MAX_LAYERS}], got {self.num_conv_layers}"
            )
        if self.base_channels < 1 or self.channel_cap < self.base_channels:
            raise SpecError("need 1 <= base_channels <= channel_cap")

    @property
    def strides(self):
        return (2,) * (self.num_conv_layers - 2) + (1, 1)

    @property
    def channels(self):
        return tuple(min(self.base_channels * 2**i, self.channel_cap) for i in range(self.num_conv_layers))

    @property
    def descriptor_width(self):
        return self.channels[-1]

    def layers(self):
        return [Layer(self.kernel, s, 1) for s in self.strides]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def patch_size(num_conv_layers: int, kernel: int = 4) -> int:
    """Receptive field of one pre-head unit, by layer-by-layer arithmetic."""
    if num_conv_layers < MIN_LAYERS:
        raise SpecError(f"patch_size needs at least {MIN_LAYERS} layers")
    strides = (2,) * (num_conv_layers - 2) + (1, 1)
    return _rf([Layer(kernel, s, 1) for s in strides])


def patch_size_closed_form(num_conv_layers: int) -> int:
    return 18 * 2 ** (num_conv_layers - 3) - 2


def grid_shape(spec: DiscriminatorSpec, height: int, width: int):
    def out(n):
        for layer in spec.layers():
            n = (n + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return n

    return out(height), out(width)


def cell_window(spec: DiscriminatorSpec, row: int, col: int):
    """Inclusive input rows and cols that can influence grid cell (row, col)."""
    layers = spec.layers()
    return input_window(layers, row), input_window(layers, col)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        cin = 3
        for i, (cout, stride) in enumerate(zip(spec.channels, spec.strides)):
            norm = spec.batch_norm and i > 0
            layers.append(nn.Conv2d(cin, cout, spec.kernel, stride, 1, bias=not norm))
            if norm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(spec.leaky_slope))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        """(N, 3, H, W) -> (N, 1, h, w) probabilities."""
        return torch.sigmoid(self.head(self.features(x)))


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), rng=0) -> Discriminator:
    net = Discriminator(spec)
    init_weights(net, as_torch_generator(rng))
    return net


def check_input(spec: DiscriminatorSpec, height: int, width: int) -> None:
    gh, gw = grid_shape(spec, height, width)
    if gh < 1 or gw < 1:
        raise ImageError(
            f"input {height}x{width} is smaller than one patch for a {spec.num_conv_layers}-layer discriminator"
        )


@torch.no_grad()
def discriminator_forward(net: Discriminator, img: torch.Tensor) -> torch.Tensor:
    """Inference pass on one (3, H, W) image; returns the (h, w) probability grid."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ImageError(f"expected a (3, rows, cols) image, got shape {tuple(img.shape)}")
    check_input(net.spec, *img.shape[1:])
    was_training = net.training
    net.eval()
    try:
        device = next(net.parameters()).device
        return net(img.unsqueeze(0).to(device))[0, 0].cpu()
    finally:
        net.train(was_training)
