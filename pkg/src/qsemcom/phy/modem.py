"""Gray-mapped 8-PSK modulation, index/bit packing, and soft demodulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ChannelError
from . import kernels

BITS_PER_PSK_SYMBOL = 3


def _gray(k: int) -> int:
    return k ^ (k >> 1)


# Constellation point k sits at angle 2*pi*k/8 and carries the Gray label of k.
_ANGLES = 2.0 * np.pi * np.arange(8) / 8.0
POINTS = np.exp(1j * _ANGLES)
LABELS = np.array([_gray(k) for k in range(8)], dtype=np.int64)
_LABEL_TO_POINT = np.empty(8, dtype=np.int64)
for _k in range(8):
    _LABEL_TO_POINT[LABELS[_k]] = _k


@dataclass
class ModulatedFrame:
    samples: np.ndarray  # complex128, unit average power
    n_bits: int  # payload bits before padding to a multiple of 3
    scheme: str = "8psk"


def bits_per_index(n_codewords: int) -> int:
    return int(np.ceil(np.log2(n_codewords)))


def indices_to_bits(indices: np.ndarray, n_codewords: int) -> np.ndarray:
    """1-based indices to an MSB-first bitstream."""
    width = bits_per_index(n_codewords)
    values = np.asarray(indices, dtype=np.int64) - 1
    if values.min() < 0 or values.max() >= n_codewords:
        raise ChannelError("symbol index out of range")
    shifts = np.arange(width - 1, -1, -1)
    return ((values[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1)


def bits_to_indices(bits: np.ndarray, n_codewords: int) -> np.ndarray:
    width = bits_per_index(n_codewords)
    if bits.size % width != 0:
        raise ChannelError("bitstream length not a multiple of bits-per-index")
    groups = bits.reshape(-1, width).astype(np.int64)
    shifts = np.arange(width - 1, -1, -1)
    values = (groups << shifts[None, :]).sum(axis=1)
    # Patterns beyond the codebook (non-power-of-two N_cw) clamp to the top.
    return np.minimum(values, n_codewords - 1) + 1


def modulate(bits: np.ndarray) -> ModulatedFrame:
    """Map a bitstream onto unit-power Gray 8-PSK; zero-pads to 3-bit groups."""
    bits = np.asarray(bits, dtype=np.uint8)
    n_bits = int(bits.size)
    pad = (-n_bits) % BITS_PER_PSK_SYMBOL
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    triples = bits.reshape(-1, 3).astype(np.int64)
    labels = (triples[:, 0] << 2) | (triples[:, 1] << 1) | triples[:, 2]
    return ModulatedFrame(samples=POINTS[_LABEL_TO_POINT[labels]], n_bits=n_bits)


def soft_demodulate(
    received: np.ndarray, h: complex, noise_var: float, n_bits: int
) -> np.ndarray:
    """Equalize with perfect CSI and return per-bit LLRs (positive = bit 0)."""
    if h == 0:
        raise ChannelError("zero channel gain must be handled as an erasure")
    y = received / h
    nv_eff = noise_var / (abs(h) ** 2)
    llr = kernels.psk8_llr(
        np.ascontiguousarray(y.real),
        np.ascontiguousarray(y.imag),
        POINTS.real.copy(),
        POINTS.imag.copy(),
        LABELS,
        float(nv_eff),
    )
    return llr.reshape(-1)[:n_bits]


def hard_bits(llr: np.ndarray) -> np.ndarray:
    return (llr < 0).astype(np.uint8)


def demodulate(
    frame: ModulatedFrame, h: complex, noise_var: float
) -> tuple[np.ndarray, bool]:
    """Coherent ML demodulation to hard bits; h=0 yields a flagged erasure."""
    if h == 0:
        rng = np.random.default_rng(0)
        return rng.integers(0, 2, frame.n_bits).astype(np.uint8), True
    llr = soft_demodulate(frame.samples, h, noise_var, frame.n_bits)
    return hard_bits(llr), False


def nearest_point_indices(received: np.ndarray, h: complex) -> np.ndarray:
    """ML symbol decisions (constellation point ids) after equalization."""
    if h == 0:
        raise ChannelError("zero channel gain must be handled as an erasure")
    y = received / h
    d2 = np.abs(y[:, None] - POINTS[None, :]) ** 2
    return d2.argmin(axis=1)
