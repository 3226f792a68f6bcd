"""Fake quantization with straight-through gradients.

Values are scaled, clamped to the signed n-bit integer range, rounded
(half-to-even, as ``np.rint`` does) and scaled back. The mask returned
alongside the quantized array marks the elements whose scaled value fell
inside the clamp range; only those receive gradient in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float
    signed: bool = True

    def __post_init__(self):
        if int(self.bits) != self.bits or self.bits < 2:
            raise ValueError(f"bits must be an integer >= 2, got {self.bits!r}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be a positive finite number, got {self.scale!r}")
        if not self.signed:
            raise NotImplementedError("only signed quantization is supported")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def quantize(x, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(xq, mask)`` for the fake-quantized array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite value {x[idx]!r} at index {idx}")
    scaled = x / spec.scale
    mask = (scaled >= spec.qmin) & (scaled <= spec.qmax)
    xq = spec.scale * np.rint(np.clip(scaled, spec.qmin, spec.qmax))
    return xq, mask


def ste_backward(upstream, mask) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if upstream.shape != mask.shape:
        raise ValueError(f"shape mismatch: upstream {upstream.shape} vs mask {mask.shape}")
    return np.where(mask, upstream, 0.0)


def calibrate_scale(x, bits: int) -> float:
    """Min-max scale so that ``max|x|`` maps onto the top grid level.

    An all-zero tensor gets scale 1.0 (any positive scale keeps zeros fixed).
    """
    peak = float(np.max(np.abs(x))) if np.size(x) else 0.0
    if peak == 0.0:
        return 1.0
    qmax = 2 ** (bits - 1) - 1
    scale = peak / qmax
    # keep the peak itself inside the clamp range despite rounding
    while peak / scale > qmax:
        scale = float(np.nextafter(scale, np.inf))
    return scale
