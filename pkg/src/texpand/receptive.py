"""Receptive-field arithmetic over 1-D layer descriptors.

Forward accumulation uses ``rf += (kernel - 1) * jump; jump *= stride`` for
convolutions. A transposed convolution of stride ``s`` reads at most
``ceil(kernel / s)`` inputs per output and divides the jump by ``s``.
``input_window`` propagates an index interval backwards instead, giving the
exact input span of one output position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class Layer:
    kernel: int
    stride: int = 1
    padding: int = 0
    transposed: bool = False


def accumulate(layers, rf=1, jump=Fraction(1)):
    """Return ``(rf, jump)`` after applying ``layers`` in order."""
    rf, jump = Fraction(rf), Fraction(jump)
    for layer in layers:
        if layer.transposed:
            rf += (math.ceil(layer.kernel / layer.stride) - 1) * jump
            jump /= layer.stride
        else:
            rf += (layer.kernel - 1) * jump
            jump *= layer.stride
    return rf, jump


def receptive_field(layers) -> int:
    rf, _ = accumulate(layers)
    return math.ceil(rf)


def input_window(layers, index: int) -> tuple[int, int]:
    """Inclusive input interval that can influence output position ``index``.

    Padding is treated as virtual coordinates, so the result may extend past
    the real input borders.
    """
    lo, hi = index, index
    for layer in reversed(layers):
        k, s, p = layer.kernel, layer.stride, layer.padding
        if layer.transposed:
            # out = in * s - p + t, t in [0, k)
            lo = -((-(lo + p - k + 1)) // s)
            hi = (hi + p) // s
        else:
            lo = lo * s - p
            hi = hi * s - p + k - 1
    return lo, hi
