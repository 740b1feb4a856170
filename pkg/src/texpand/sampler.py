"""Training-pair extraction and diversification inputs.

All randomness comes from an injected ``numpy.random.Generator`` so that a
single stream can drive a reproducible run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import SamplingError


@dataclass
class BlockPair:
    source: torch.Tensor  # (3, k, k)
    target: torch.Tensor  # (3, 2k, 2k)
    source_offset: tuple[int, int]  # inside target
    target_offset: tuple[int, int]  # inside the exemplar
    k: int


@dataclass(frozen=True)
class TileGrid:
    rows: int
    cols: int
    tile_h: int
    tile_w: int
    permutation: tuple[int, ...]  # output tile i holds input tile permutation[i]

    def inverse(self) -> "TileGrid":
        inv = [0] * len(self.permutation)
        for dst, src in enumerate(self.permutation):
            inv[src] = dst
        return TileGrid(self.rows, self.cols, self.tile_h, self.tile_w, tuple(inv))


def crop(exemplar: torch.Tensor, offset: tuple[int, int], size: tuple[int, int]) -> torch.Tensor:
    """Exact copy of the window with top-left ``offset`` and ``size`` (rows, cols)."""
    row, col = offset
    h, w = size
    H, W = exemplar.shape[-2:]
    if row < 0 or col < 0 or h < 1 or w < 1 or row + h > H or col + w > W:
        raise SamplingError(f"window at {offset} of size {size} exceeds image bounds {H}x{W}")
    return exemplar[..., row : row + h, col : col + w].clone()


def random_crop(exemplar: torch.Tensor, size: tuple[int, int], rng: np.random.Generator):
    """Uniformly placed crop; returns (window, offset)."""
    H, W = exemplar.shape[-2:]
    h, w = size
    if h > H or w > W:
        raise SamplingError(f"crop {h}x{w} larger than image {H}x{W}")
    row = int(rng.integers(0, H - h + 1))
    col = int(rng.integers(0, W - w + 1))
    return crop(exemplar, (row, col), size), (row, col)


def sample_block_pair(
    exemplar: torch.Tensor, k: int, rng: np.random.Generator, augment: bool = False
) -> BlockPair:
    """Draw a 2k x 2k target block and a k x k source block inside it.

    Both offsets are uniform over all valid integer positions. With
    ``augment`` the target is randomly flipped before the source is cut, so
    containment still holds.
    """
    H, W = exemplar.shape[-2:]
    if H < 2 * k or W < 2 * k:
        raise SamplingError(f"exemplar {H}x{W} is too small for k={k}; need at least {2 * k}x{2 * k}")
    target, target_offset = random_crop(exemplar, (2 * k, 2 * k), rng)
    if augment:
        if rng.random() < 0.5:
            target = target.flip(-1)
        if rng.random() < 0.5:
            target = target.flip(-2)
    source_offset = (int(rng.integers(0, k + 1)), int(rng.integers(0, k + 1)))
    source = crop(target, source_offset, (k, k))
    return BlockPair(source, target, source_offset, target_offset, k)


def sample_batch(exemplar, k, batch_size, rng, augment=False):
    """Stack ``batch_size`` independent pairs into (N, 3, k, k) / (N, 3, 2k, 2k)."""
    pairs = [sample_block_pair(exemplar, k, rng, augment) for _ in range(batch_size)]
    return torch.stack([p.source for p in pairs]), torch.stack([p.target for p in pairs])


def apply_tile_grid(exemplar: torch.Tensor, grid: TileGrid) -> torch.Tensor:
    th, tw = grid.tile_h, grid.tile_w
    out = torch.empty_like(exemplar)
    for dst, src in enumerate(grid.permutation):
        dr, dc = divmod(dst, grid.cols)
        sr, sc = divmod(src, grid.cols)
        out[..., dr * th : (dr + 1) * th, dc * tw : (dc + 1) * tw] = exemplar[
            ..., sr * th : (sr + 1) * th, sc * tw : (sc + 1) * tw
        ]
    return out


def shuffle_tiles(
    exemplar: torch.Tensor,
    rows: int,
    cols: int,
    rng: np.random.Generator | None = None,
    permutation=None,
):
    """Split into ``rows x cols`` tiles and permute them.

    An explicit ``permutation`` overrides the random draw.
    """
    H, W = exemplar.shape[-2:]
    if rows < 1 or cols < 1 or H % rows or W % cols:
        raise SamplingError(f"image {H}x{W} is not divisible into a {rows}x{cols} tile grid")
    n = rows * cols
    if permutation is None:
        if rng is None:
            raise SamplingError("shuffle_tiles needs either rng or an explicit permutation")
        permutation = rng.permutation(n)
    permutation = tuple(int(p) for p in permutation)
    if sorted(permutation) != list(range(n)):
        raise SamplingError(f"permutation is not a bijection on {n} tiles")
    grid = TileGrid(rows, cols, H // rows, W // cols, permutation)
    return apply_tile_grid(exemplar, grid), grid
