"""Inference-time procedures built on a trained generator.

None of these mutate the generator; they run it in inference mode only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import imagecore
from .errors import ImageError, PixelBudgetError
from .generator import Generator, generator_forward
from .sampler import random_crop, shuffle_tiles

DEFAULT_PIXEL_BUDGET = 64_000_000


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def expand(net: Generator, img: torch.Tensor) -> torch.Tensor:
    return generator_forward(net, img)


def expand_repeated(
    net: Generator,
    img: torch.Tensor,
    cycles: int,
    crop_policy: str = "none",
    rng=None,
    pixel_budget: int = DEFAULT_PIXEL_BUDGET,
) -> torch.Tensor:
    """Feed the generator its own output ``cycles`` times.

    ``crop_policy="recrop"`` cuts a random window of the original input size
    from each intermediate result before the next cycle.
    """
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    if crop_policy not in ("none", "recrop"):
        raise ValueError(f"crop_policy must be 'none' or 'recrop', got {crop_policy!r}")
    size = tuple(img.shape[1:])
    h, w = size
    scale = 2**cycles if crop_policy == "none" else 2
    if h * w * scale * scale > pixel_budget:
        raise PixelBudgetError(
            f"{cycles} cycles on {h}x{w} reach {h * scale}x{w * scale} = {h * w * scale * scale} pixels, "
            f"over the budget of {pixel_budget}"
        )
    gen = _rng(rng)
    out = img
    for cycle in range(cycles):
        out = expand(net, out)
        if crop_policy == "recrop" and cycle < cycles - 1:
            out, _ = random_crop(out, size, gen)
    return out


@dataclass
class StressCycle:
    expanded: torch.Tensor  # (3, 2h, 2w) result of this cycle
    crop: torch.Tensor  # (3, h, w) window fed to the next cycle
    offset: tuple


def stress_test(net: Generator, exemplar: torch.Tensor, cycles: int, rng=None) -> list:
    """Repeated expand-then-recrop at the exemplar's size, without retraining."""
    if cycles < 1:
        raise ValueError(f"cycles must be >= 1, got {cycles}")
    gen = _rng(rng)
    size = tuple(exemplar.shape[1:])
    current = exemplar
    results = []
    for _ in range(cycles):
        expanded = expand(net, current)
        window, offset = random_crop(expanded, size, gen)
        results.append(StressCycle(expanded, window, offset))
        current = window
    return results


def as_guide(guide: torch.Tensor) -> torch.Tensor:
    """Accept (H, W), (1, H, W) or (3, H, W) guides; grayscale is replicated to RGB."""
    if guide.dim() == 2:
        guide = guide.unsqueeze(0)
    if guide.dim() != 3 or guide.shape[0] not in (1, 3):
        raise ImageError(f"guide must be grayscale or RGB, got shape {tuple(guide.shape)}")
    if guide.shape[0] == 1:
        guide = guide.repeat(3, 1, 1)
    imagecore.check_canonical(guide)
    return guide


def transfer(net: Generator, guide: torch.Tensor) -> torch.Tensor:
    return expand(net, as_guide(guide))


def diversify(net: Generator, exemplar: torch.Tensor, mode: str, params: dict | None = None, rng=None):
    """Build a perturbed input from the exemplar and expand it.

    Modes and their params:
      crop    -- ``size`` (rows, cols), default (256, 256)
      shuffle -- ``grid`` (rows, cols), default (4, 4)
      noise   -- ``amplitude`` (0.1), ``seed``, ``octaves`` (4), ``persistence`` (0.5), ``cell_size``
    """
    params = dict(params or {})
    gen = _rng(rng)
    if mode == "crop":
        size = tuple(params.get("size", (256, 256)))
        source, _ = random_crop(exemplar, size, gen)
    elif mode == "shuffle":
        rows, cols = params.get("grid", (4, 4))
        source, _ = shuffle_tiles(exemplar, rows, cols, gen)
    elif mode == "noise":
        amplitude = float(params.get("amplitude", 0.1))
        seed = params.get("seed")
        if seed is None:
            seed = int(gen.integers(0, 2**31))
        h, w = exemplar.shape[1:]
        field = imagecore.perlin(
            h,
            w,
            seed=seed,
            octaves=params.get("octaves", 4),
            persistence=params.get("persistence", 0.5),
            cell_size=params.get("cell_size"),
        )
        source = imagecore.add_noise(exemplar, field, amplitude)
    else:
        raise ValueError(f"unknown diversification mode {mode!r}; use crop, shuffle or noise")
    return expand(net, source)

