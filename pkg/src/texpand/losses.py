"""Adversarial, L1 and Gram-matrix style losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from .errors import ExtractorError, ImageError

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 1.0
    enable_adv: bool = True
    enable_l1: bool = True
    enable_style: bool = True


def _reference_weights(channels):
    return tuple(1000.0 / c**2 for c in channels)


@dataclass(frozen=True)
class StyleLayerSet:
    """Extractor taps and their Gram-loss weights (1000 / C^2 per tap)."""

    names: tuple = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
    channels: tuple = (64, 128, 256, 512, 512)
    weights: tuple = field(default=_reference_weights((64, 128, 256, 512, 512)))


@dataclass
class LossReport:
    iteration: int
    lr: float
    adv_G: float
    adv_D: float
    l1: float
    style: float
    total_G: float

    FIELDS = ("iteration", "lr", "adv_G", "adv_D", "l1", "style", "total_G")

    def as_dict(self):
        return asdict(self)

    def tsv(self) -> str:
        return "\t".join([str(self.iteration)] + [repr(float(getattr(self, f))) for f in self.FIELDS[1:]])

    @classmethod
    def from_tsv(cls, line: str):
        parts = line.rstrip("\n").split("\t")
        return cls(int(parts[0]), *(float(p) for p in parts[1:]))


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """(C, H, W) -> (C, C) or (N, C, H, W) -> (N, C, C), normalised by H*W."""
    if features.dim() not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) features, got {tuple(features.shape)}")
    h, w = features.shape[-2:]
    if h * w < 1:
        raise ValueError("feature map is empty")
    flat = features.flatten(-2)
    return flat @ flat.transpose(-1, -2) / (h * w)


def _batched(img):
    return img.unsqueeze(0) if img.dim() == 3 else img


def style_loss(
    fake: torch.Tensor,
    real: torch.Tensor,
    extractor,
    layers: StyleLayerSet = StyleLayerSet(),
    real_grams=None,
) -> torch.Tensor:
    """Weighted sum over taps of the mean squared Gram difference.

    ``real_grams`` may carry precomputed target Grams to avoid a second pass.
    """
    if extractor is None:
        from .extractor import ACQUIRE_HINT

        raise ExtractorError(f"style loss needs extractor weights; {ACQUIRE_HINT}")
    fake = _batched(fake)
    if real_grams is None:
        real = _batched(real)
        if real.shape != fake.shape:
            raise ImageError(f"style_loss shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
        with torch.no_grad():
            real_grams = [gram_matrix(t) for t in extractor(real)]
    total = fake.new_zeros(())
    for weight, tap, target in zip(layers.weights, extractor(fake), real_grams):
        total = total + weight * (gram_matrix(tap) - target).pow(2).mean()
    return total


def l1_loss(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    if fake.shape != real.shape:
        raise ImageError(f"l1_loss shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    return (fake - real).abs().mean()


def bce(prob: torch.Tensor, label: float, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities clamped to [eps, 1 - eps]."""
    p = prob.clamp(eps, 1.0 - eps)
    if label == 1.0:
        return -torch.log(p).mean()
    if label == 0.0:
        return -torch.log1p(-p).mean()
    return -(label * torch.log(p) + (1 - label) * torch.log1p(-p)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return bce(d_real, 1.0) + bce(d_fake, 0.0)


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating form, -log D(G(S))."""
    return bce(d_fake, 1.0)


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Return ``(loss_D, loss_G)`` averaged over grid cells."""
    return discriminator_loss(d_real, d_fake), generator_adv_loss(d_fake)


def total_generator_loss(adv, l1, style, weights: LossWeights):
    """Flag-masked adv + lambda1 * l1 + lambda2 * style, summed in that order."""
    total = None
    for enabled, scale, term in (
        (weights.enable_adv, None, adv),
        (weights.enable_l1, weights.lambda1, l1),
        (weights.enable_style, weights.lambda2, style),
    ):
        if not enabled:
            continue
        value = term if scale is None else scale * term
        total = value if total is None else total + value
    return total


def is_finite(*values) -> bool:
    return all(math.isfinite(float(v.detach()) if torch.is_tensor(v) else float(v)) for v in values)
