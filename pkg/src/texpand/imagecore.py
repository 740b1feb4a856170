"""Image planes, PNG I/O and procedural gradient noise.

An image plane is a float32 ``torch.Tensor`` laid out ``(channels, rows, cols)``.
RGB planes live in the canonical range [-1, 1]; 8-bit value ``v`` maps to
``v / 127.5 - 1`` so both endpoints are exact.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ImageError

log = logging.getLogger(__name__)

QUANTUM = 1.0 / 127.5
RANGE_TOLERANCE = 1e-4


def from_uint8(array: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) canonical float plane."""
    plane = torch.from_numpy(array.transpose(2, 0, 1).copy()).float()
    return plane / 127.5 - 1.0


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) canonical plane -> (H, W, 3) uint8, rounding to nearest level."""
    check_canonical(img)
    levels = torch.round((img.detach().cpu().double().clamp(-1.0, 1.0) + 1.0) * 127.5)
    return levels.to(torch.uint8).permute(1, 2, 0).numpy()


def check_canonical(img: torch.Tensor, channels: int | None = 3) -> None:
    if img.dim() != 3:
        raise ImageError(f"image must have shape (channels, rows, cols), got {tuple(img.shape)}")
    if channels is not None and img.shape[0] != channels:
        raise ImageError(f"image must have {channels} channels, got {img.shape[0]}")
    if not torch.isfinite(img).all():
        raise ImageError("image contains non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if lo < -1.0 - RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
        raise ImageError(f"image values [{lo:.6g}, {hi:.6g}] fall outside [-1, 1]; clamp explicitly first")


def load_image(path, allow_grayscale: bool = False) -> torch.Tensor:
    """Read an 8-bit PNG into a canonical (3, H, W) plane.

    Alpha is dropped with a warning. Grayscale input is rejected unless
    ``allow_grayscale`` is set, in which case it is replicated to RGB.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageError(f"image file not found: {path}")
    try:
        pil = Image.open(path)
        pil.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    if pil.format != "PNG":
        raise ImageError(f"unsupported format {pil.format!r} for {path}; only PNG is accepted")

    mode = pil.mode
    if mode == "P":
        pil = pil.convert("RGBA" if "transparency" in pil.info else "RGB")
        mode = pil.mode
    if mode in ("RGBA", "LA"):
        log.warning("stripping alpha channel from %s", path)
        pil = pil.convert("RGB" if mode == "RGBA" else "L")
        mode = pil.mode
    if mode == "L":
        if not allow_grayscale:
            raise ImageError(f"channel count 1 (mode L) in {path}; expected 3-channel RGB")
        pil = pil.convert("RGB")
    elif mode != "RGB":
        raise ImageError(f"unsupported pixel mode {mode!r} in {path}; expected 8-bit RGB")
    return from_uint8(np.asarray(pil, dtype=np.uint8))


def save_image(img: torch.Tensor, path) -> None:
    path = os.fspath(path)
    array = to_uint8(img)
    try:
        Image.fromarray(array, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class NoiseField:
    height: int
    width: int
    seed: int
    octaves: int
    persistence: float
    cell_size: float
    values: np.ndarray  # (height, width) float32 in [-1, 1]

    def as_image(self) -> torch.Tensor:
        """Replicate to a 3-channel plane, e.g. to use noise as a transfer guide."""
        return torch.from_numpy(self.values).unsqueeze(0).repeat(3, 1, 1)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_lattices(seed: int, height: int, width: int, octaves: int, cell_size: float):
    """Per-octave ``(spacing, gradients)`` with unit gradient vectors of shape (rows, cols, 2).

    Octave ``o`` uses lattice spacing ``cell_size / 2**o``; gradients are drawn
    from one seeded stream, octave by octave.
    """
    rng = np.random.default_rng(seed)
    lattices = []
    for octave in range(octaves):
        spacing = cell_size / 2**octave
        rows = int(math.floor((height - 1) / spacing)) + 2
        cols = int(math.floor((width - 1) / spacing)) + 2
        angles = rng.uniform(0.0, 2.0 * math.pi, size=(rows, cols))
        grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        lattices.append((spacing, grads))
    return lattices


def _octave(height, width, spacing, grads):
    y = np.arange(height, dtype=np.float64)[:, None] / spacing
    x = np.arange(width, dtype=np.float64)[None, :] / spacing
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy = y - y0
    fx = x - x0

    def corner(dy, dx):
        g = grads[y0 + dy, x0 + dx]
        return g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    return top + v * (bottom - top)


def perlin(
    height: int,
    width: int,
    seed: int = 0,
    octaves: int = 4,
    persistence: float = 0.5,
    cell_size: float | None = None,
) -> NoiseField:
    """Fractal 2D gradient noise in [-1, 1].

    ``cell_size`` is the lattice spacing of the coarsest octave in pixels and
    defaults to a quarter of the longer side. Single-octave unit-gradient
    noise is bounded by sqrt(1/2), so the octave sum is divided by
    ``sqrt(1/2) * sum(persistence**o)``.
    """
    if height < 1 or width < 1:
        raise ValueError(f"noise dimensions must be positive, got {height}x{width}")
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    if not 0.0 < persistence <= 1.0:
        raise ValueError(f"persistence must lie in (0, 1], got {persistence}")
    if cell_size is None:
        cell_size = max(height, width) / 4.0
    if cell_size <= 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")

    total = np.zeros((height, width), dtype=np.float64)
    amplitude, norm = 1.0, 0.0
    for spacing, grads in gradient_lattices(seed, height, width, octaves, cell_size):
        total += amplitude * _octave(height, width, spacing, grads)
        norm += amplitude
        amplitude *= persistence
    values = np.clip(total / (norm * math.sqrt(0.5)), -1.0, 1.0).astype(np.float32)
    return NoiseField(height, width, seed, octaves, persistence, float(cell_size), values)


def add_noise(img: torch.Tensor, noise: NoiseField, amplitude: float) -> torch.Tensor:
    if tuple(img.shape[1:]) != (noise.height, noise.width):
        raise ImageError(
            f"noise field {noise.height}x{noise.width} does not match image {img.shape[1]}x{img.shape[2]}"
        )
    if amplitude == 0:
        return img.clone()
    field = torch.from_numpy(noise.values).to(img.dtype)
    return (img + amplitude * field).clamp(-1.0, 1.0)
