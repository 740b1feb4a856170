"""Fully-convolutional 2x expansion generator.

Layout (base width ``c``): a 7x7 stride-1 conv and two 3x3 stride-2 convs
(c, 2c, 4c channels), a chain of residual blocks at 4c, a 3x3 conv widening
to 8c, three stride-2 transposed convs halving the width each time, and a
7x7 conv back to RGB with tanh. Spatially that is /4 then x8, so the output
is exactly twice the input on each side.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ImageError, SpecError
from .receptive import Layer, input_window
from .receptive import receptive_field as _rf

INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 64
    num_resblocks: int = 6
    encoder_kernels: tuple = (7, 3, 3)
    encoder_strides: tuple = (1, 2, 2)
    resblock_kernel: int = 3
    widen_kernel: int = 3
    upsample_kernel: int = 3
    num_upsamples: int = 3
    output_kernel: int = 7
    padding: str = "reflect"
    batch_norm: bool = True
    output_nonlinearity: str = "tanh"

    def __post_init__(self):
        # tuples survive a round trip through JSON as lists
        object.__setattr__(self, "encoder_kernels", tuple(self.encoder_kernels))
        object.__setattr__(self, "encoder_strides", tuple(self.encoder_strides))
        if self.base_channels < 1:
            raise SpecError(f"base_channels must be positive, got {self.base_channels}")
        if self.num_resblocks < 0:
            raise SpecError(f"num_resblocks must be >= 0, got {self.num_resblocks}")
        if len(self.encoder_kernels) != len(self.encoder_strides):
            raise SpecError("encoder_kernels and encoder_strides differ in length")
        if any(s not in (1, 2) for s in self.encoder_strides) or self.encoder_strides.count(2) != 2:
            raise SpecError(f"encoder needs exactly two stride-2 layers, got strides {self.encoder_strides}")
        if self.num_upsamples != 3:
            raise SpecError(f"decoder needs exactly three x2 upsampling layers, got {self.num_upsamples}")
        kernels = (*self.encoder_kernels, self.resblock_kernel, self.widen_kernel, self.output_kernel)
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise SpecError(f"convolution kernels must be odd, got {kernels}")
        if self.upsample_kernel < 2:
            raise SpecError("upsample_kernel must be >= 2")
        if self.padding not in ("reflect", "zeros"):
            raise SpecError(f"padding must be 'reflect' or 'zeros', got {self.padding!r}")
        if self.output_nonlinearity != "tanh":
            raise SpecError("only a tanh output keeps results in the canonical range")

    @property
    def encoder_channels(self):
        return tuple(self.base_channels * 2**i for i in range(len(self.encoder_kernels)))

    @property
    def trunk_channels(self):
        return self.encoder_channels[-1]

    @property
    def decoder_channels(self):
        widened = 2 * self.trunk_channels
        return tuple(widened // 2**i for i in range(self.num_upsamples + 1))

    def trunk_layers(self):
        """Encoder and residual convolutions as receptive-field descriptors."""
        layers = [Layer(k, s, k // 2) for k, s in zip(self.encoder_kernels, self.encoder_strides)]
        k = self.resblock_kernel
        layers += [Layer(k, 1, k // 2)] * (2 * self.num_resblocks)
        return layers

    def all_layers(self):
        layers = self.trunk_layers() + [Layer(self.widen_kernel, 1, self.widen_kernel // 2)]
        layers += [Layer(self.upsample_kernel, 2, self.upsample_kernel // 2, transposed=True)] * self.num_upsamples
        layers.append(Layer(self.output_kernel, 1, self.output_kernel // 2))
        return layers

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def receptive_field(spec: GeneratorSpec) -> int:
    """Receptive field of a unit at the end of the residual chain."""
    return _rf(spec.trunk_layers())


def full_receptive_field(spec: GeneratorSpec) -> int:
    """Receptive field of one output pixel, measured in input pixels."""
    return _rf(spec.all_layers())


def output_window(spec: GeneratorSpec, row: int, col: int):
    """Inclusive input rows and cols that can influence output pixel (row, col)."""
    layers = spec.all_layers()
    return input_window(layers, row), input_window(layers, col)


def _norm(channels, enabled):
    return nn.BatchNorm2d(channels) if enabled else nn.Identity()


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride, spec: GeneratorSpec, relu=True):
        super().__init__()
        self.conv = nn.Conv2d(
            cin, cout, kernel, stride, kernel // 2, bias=not spec.batch_norm, padding_mode=spec.padding
        )
        self.norm = _norm(cout, spec.batch_norm)
        self.act = nn.ReLU() if relu else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResBlock(nn.Module):
    def __init__(self, channels, spec: GeneratorSpec):
        super().__init__()
        k = spec.resblock_kernel
        self.body = nn.Sequential(
            ConvBlock(channels, channels, k, 1, spec),
            ConvBlock(channels, channels, k, 1, spec, relu=False),
        )

    def forward(self, x):
        return x + self.body(x)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, spec: GeneratorSpec):
        super().__init__()
        k = spec.upsample_kernel
        # output_padding pins every stage to exactly twice its input size
        self.conv = nn.ConvTranspose2d(cin, cout, k, 2, k // 2, output_padding=1, bias=not spec.batch_norm)
        self.norm = _norm(cout, spec.batch_norm)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        enc = (3, *spec.encoder_channels)
        self.encoder = nn.ModuleList(
            ConvBlock(cin, cout, k, s, spec)
            for cin, cout, k, s in zip(enc[:-1], enc[1:], spec.encoder_kernels, spec.encoder_strides)
        )
        self.resblocks = nn.ModuleList(ResBlock(spec.trunk_channels, spec) for _ in range(spec.num_resblocks))
        dec = spec.decoder_channels
        self.widen = ConvBlock(spec.trunk_channels, dec[0], spec.widen_kernel, 1, spec)
        self.upsample = nn.ModuleList(UpBlock(cin, cout, spec) for cin, cout in zip(dec[:-1], dec[1:]))
        self.head = nn.Conv2d(dec[-1], 3, spec.output_kernel, 1, spec.output_kernel // 2, padding_mode=spec.padding)

    def layer_names(self):
        return ["relu", *(f"resblock_{i + 1}" for i in range(len(self.resblocks))), "conv"]

    def forward(self, x, taps=None):
        """Expand ``x``; with ``taps`` (a dict) also record named intermediate maps."""
        for block in self.encoder:
            x = block(x)
        if taps is not None:
            taps["relu"] = x
        for i, block in enumerate(self.resblocks):
            x = block(x)
            if taps is not None:
                taps[f"resblock_{i + 1}"] = x
        x = self.widen.conv(x)
        if taps is not None:
            taps["conv"] = x
        x = self.widen.act(self.widen.norm(x))
        for block in self.upsample:
            x = block(x)
        return torch.tanh(self.head(x))


def init_weights(module: nn.Module, generator: torch.Generator, std: float = INIT_STD) -> None:
    """Conv weights ~ N(0, std^2); biases 0; norm scales 1, offsets 0."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


def as_torch_generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator()
    gen.manual_seed(int(rng))
    return gen


def build_generator(spec: GeneratorSpec = GeneratorSpec(), rng=0) -> Generator:
    """Construct and initialise a generator; ``rng`` is a seed or ``torch.Generator``."""
    net = Generator(spec)
    init_weights(net, as_torch_generator(rng))
    return net


def check_input(img: torch.Tensor) -> None:
    if img.dim() != 3 or img.shape[0] != 3:
        raise ImageError(f"expected a (3, rows, cols) image, got shape {tuple(img.shape)}")
    h, w = img.shape[1:]
    if h < 16 or w < 16:
        raise ImageError(f"input {h}x{w} is too small; both sides must be >= 16")
    if h % 4 or w % 4:
        raise ImageError(f"input {h}x{w} is not divisible by 4")


@torch.no_grad()
def generator_forward(net: Generator, img: torch.Tensor) -> torch.Tensor:
    """Inference pass: running normalisation statistics, (3, h, w) -> (3, 2h, 2w)."""
    check_input(img)
    was_training = net.training
    net.eval()
    try:
        device = next(net.parameters()).device
        return net(img.unsqueeze(0).to(device))[0].cpu()
    finally:
        net.train(was_training)


@torch.no_grad()
def feature_maps(net: Generator, img: torch.Tensor) -> dict:
    check_input(img)
    was_training = net.training
    net.eval()
    taps = {}
    try:
        device = next(net.parameters()).device
        net(img.unsqueeze(0).to(device), taps=taps)
    finally:
        net.train(was_training)
    return {name: t[0].cpu() for name, t in taps.items()}


def visualize_features(net: Generator, img: torch.Tensor, layer_name: str, channel: int | None = None):
    """Grayscale rendering of one intermediate map, min-max rescaled to [-1, 1].

    Averages over channels unless ``channel`` is given.
    """
    if layer_name not in net.layer_names():
        raise KeyError(f"unknown layer {layer_name!r}; choose from {net.layer_names()}")
    fmap = feature_maps(net, img)[layer_name]
    if channel is None:
        plane = fmap.mean(0)
    else:
        if not 0 <= channel < fmap.shape[0]:
            raise KeyError(f"channel {channel} out of range for {layer_name} with {fmap.shape[0]} channels")
        plane = fmap[channel]
    lo, hi = plane.min(), plane.max()
    if hi - lo > 0:
        plane = (plane - lo) / (hi - lo) * 2.0 - 1.0
    else:
        plane = torch.zeros_like(plane)
    return plane.unsqueeze(0).repeat(3, 1, 1)


def feature_difference(net: Generator, img: torch.Tensor, a: str = "resblock_5", b: str = "resblock_6") -> float:
    """Normalised L2 distance ||f_a - f_b|| / ||f_b|| between two tapped maps."""
    maps = feature_maps(net, img)
    for name in (a, b):
        if name not in maps:
            raise KeyError(f"unknown layer {name!r}; choose from {list(maps)}")
    denom = maps[b].norm()
    return float((maps[a] - maps[b]).norm() / denom) if denom > 0 else float((maps[a] - maps[b]).norm())
