"""Symbol vector packing and per-image symbol accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ChannelError
from ..quantizer import QuantizedFeatures
from . import ldpc
from .modem import BITS_PER_PSK_SYMBOL, bits_per_index


def pack_symbols(
    qs: list[QuantizedFeatures], selection: tuple[int, ...]
) -> np.ndarray:
    """Row-major flatten each index matrix, concatenated in ascending layer order."""
    if len(qs) != len(selection):
        raise ChannelError(
            f"expected {len(selection)} quantized matrices, got {len(qs)}"
        )
    ordered = sorted(qs, key=lambda q: q.layer)
    if tuple(q.layer for q in ordered) != tuple(sorted(selection)):
        raise ChannelError("quantized layers do not match the layer selection")
    shapes = {tuple(q.indices.shape) for q in ordered}
    if len(shapes) != 1:
        raise ChannelError(f"inconsistent index matrix shapes: {shapes}")
    return np.concatenate(
        [q.indices.detach().cpu().numpy().astype(np.int64).reshape(-1) for q in ordered]
    )


def unpack_symbols(
    s: np.ndarray,
    selection: tuple[int, ...],
    matrix_shape: tuple[int, int],
) -> list[QuantizedFeatures]:
    """Exact inverse of pack_symbols."""
    n_i, n_seg = matrix_shape
    per_layer = n_i * n_seg
    expected = per_layer * len(selection)
    if s.size != expected:
        raise ChannelError(f"symbol vector length {s.size}, expected {expected}")
    out = []
    for i, layer in enumerate(sorted(selection)):
        block = s[i * per_layer : (i + 1) * per_layer]
        out.append(
            QuantizedFeatures(
                indices=torch.from_numpy(
                    np.ascontiguousarray(block.reshape(n_i, n_seg))
                ),
                layer=layer,
            )
        )
    return out


@dataclass
class SymbolBudget:
    indices: int
    bits_per_index: int
    info_bits: int
    coded_bits: int
    channel_symbols: int
    scheme: str


def symbol_count(
    n_layers: int,
    n_image_tokens: int,
    n_segments: int,
    n_codewords: int,
    scheme: str = "none",
    ldpc_block_length: int = ldpc.DEFAULT_BLOCK_LENGTH,
) -> SymbolBudget:
    """Per-image transmission budget: index, bit, and channel-symbol counts."""
    indices = n_layers * n_image_tokens * n_segments
    width = bits_per_index(n_codewords)
    info_bits = indices * width
    if scheme == "none":
        coded = info_bits
    elif scheme == "repetition-3":
        coded = 3 * info_bits
    elif scheme == "ldpc-3-6":
        code = ldpc.make_ldpc_code(ldpc_block_length)
        coded = math.ceil(info_bits / code.k) * code.n
    else:
        raise ChannelError(f"unknown coding scheme {scheme!r}")
    return SymbolBudget(
        indices=indices,
        bits_per_index=width,
        info_bits=info_bits,
        coded_bits=coded,
        channel_symbols=math.ceil(coded / BITS_PER_PSK_SYMBOL),
        scheme=scheme,
    )


def symbol_count_for_config(cfg) -> SymbolBudget:
    return symbol_count(
        n_layers=len(cfg.model.layer_selection),
        n_image_tokens=cfg.n_image_tokens,
        n_segments=cfg.n_segments,
        n_codewords=cfg.quantizer.codeword_count,
        scheme=cfg.phy.scheme,
        ldpc_block_length=cfg.phy.ldpc_block_length,
    )
