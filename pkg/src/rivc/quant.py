"""Quantization operators: k-bit activation/weight quantizers, clamped
quantized ReLU, training-time noise injection, and the straight-through
gradient rules used by the network engine.

All rounding is half-away-from-zero.  A single fixed rounding mode keeps the
quantized-network grid and the spike-count grid of the converted spiking
network aligned exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DOREFA = "dorefa"
PAPER_LITERAL = "paper_literal"

_VARIANTS = (DOREFA, PAPER_LITERAL)


@dataclass(frozen=True)
class QuantConfig:
    """Quantization settings: bit count, activation scale and weight-map variant.

    ``bits`` gives 2**bits - 1 representable intervals over [0, sigma] per
    activation.  ``weight_map`` selects the trailing constant of the weight
    quantizer: ``dorefa`` maps onto the symmetric grid [-1, 1]; the
    ``paper_literal`` variant keeps an asymmetric [-1/2, 3/2] range and exists
    only for fidelity experiments (it is not convertible to integer spike
    weights).
    """

    bits: int
    sigma: float = 1.0
    weight_map: str = DOREFA

    def __post_init__(self) -> None:
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.weight_map not in _VARIANTS:
            raise ValueError(f"weight_map must be one of {_VARIANTS}, got {self.weight_map!r}")

    @property
    def levels(self) -> int:
        """Number of grid intervals, 2**bits - 1."""
        return 2**self.bits - 1


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest integer, halves away from zero (never banker's)."""
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


def quantize_activation(x: np.ndarray | float, bits: int) -> np.ndarray | float:
    """Snap a value in [0, 1] to the k-bit grid {0, 1/(2^k-1), ..., 1}.

    Callers are responsible for clamping inputs into [0, 1] first.
    """
    n = 2**bits - 1
    return round_half_away(n * np.asarray(x, dtype=float)) / n


def quantize_weights(w: np.ndarray, bits: int, variant: str = DOREFA) -> np.ndarray:
    """Quantize one layer's weights to the k-bit grid.

    The layer is tanh-normalized by its own max magnitude, snapped to the
    activation grid and mapped back to a signed range.  An all-zero layer maps
    to all zeros (no division by the zero maximum).
    """
    w = np.asarray(w, dtype=float)
    t = np.tanh(w)
    m = np.max(np.abs(t))
    if m == 0.0:
        return np.zeros_like(w)
    z = t / (2.0 * m) + 0.5
    tail = 1.0 if variant == DOREFA else 0.5
    return 2.0 * quantize_activation(z, bits) - tail


def weight_noise(shape: tuple[int, ...], bits: int, rng: np.random.Generator) -> np.ndarray:
    """Per-weight uniform noise with amplitude half a grid step: U(-.5,.5)/(2^k-1)."""
    return rng.uniform(-0.5, 0.5, size=shape) / (2**bits - 1)


def quantize_weights_noisy(
    w: np.ndarray, bits: int, rng: np.random.Generator, variant: str = DOREFA
) -> np.ndarray:
    """Weight quantizer with noise injected into the grid argument.

    Used only while the full-precision weights are being updated; the noise
    perturbs each weight's rounding decision by at most one grid level.
    """
    w = np.asarray(w, dtype=float)
    t = np.tanh(w)
    m = np.max(np.abs(t))
    if m == 0.0:
        return np.zeros_like(w)
    z = t / (2.0 * m) + 0.5 + weight_noise(w.shape, bits, rng)
    np.clip(z, 0.0, 1.0, out=z)
    tail = 1.0 if variant == DOREFA else 0.5
    return 2.0 * quantize_activation(z, bits) - tail


def relu_q(x: np.ndarray | float, bits: int, sigma: float = 1.0) -> np.ndarray | float:
    """Clamped, grid-snapped ReLU with range [0, sigma] and 2^k-1 levels."""
    n = 2**bits - 1
    clamped = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return (sigma / n) * round_half_away(n * clamped)


def relu_q_grad(x_pre: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Straight-through derivative of relu_q at the pre-clamp input.

    The quantizer is treated as its linear envelope sigma * clamp(x, 0, 1):
    gradient sigma inside the active range, zero where the clamp saturates.
    """
    x_pre = np.asarray(x_pre, dtype=float)
    return sigma * ((x_pre >= 0.0) & (x_pre <= 1.0)).astype(float)
