"""Segment-wise vector quantization.

Each D-dimensional feature row is split into L contiguous segments of length
N_L; every segment is replaced by the index of its nearest codeword in that
segment's codebook.  Indices are 1-based to match the wire format.  Ties in
the nearest-codeword search break toward the smallest codeword index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from .errors import QsemcomError

MAGIC = b"UOCB"
FORMAT_VERSION = 1


@dataclass
class Codebook:
    codewords: torch.Tensor  # (L, N_cw, N_L) float32

    def __post_init__(self) -> None:
        if self.codewords.ndim != 3:
            raise QsemcomError("codebook must be (L, N_cw, N_L)")
        if self.codewords.shape[1] < 2:
            raise QsemcomError("codebook needs at least 2 codewords per segment")
        if not torch.isfinite(self.codewords).all():
            raise QsemcomError("codebook contains non-finite codewords")

    @property
    def n_segments(self) -> int:
        return self.codewords.shape[0]

    @property
    def n_codewords(self) -> int:
        return self.codewords.shape[1]

    @property
    def segment_length(self) -> int:
        return self.codewords.shape[2]

    @property
    def dim(self) -> int:
        return self.n_segments * self.segment_length

    def clone(self) -> "Codebook":
        return Codebook(self.codewords.detach().clone())


@dataclass
class QuantizedFeatures:
    indices: torch.Tensor  # (N_I, L) int64, entries in 1..N_cw
    layer: int

    def validate(self, n_codewords: int) -> "QuantizedFeatures":
        if self.indices.ndim != 2:
            raise QsemcomError("quantized indices must be a 2-D matrix")
        if self.indices.min() < 1 or self.indices.max() > n_codewords:
            raise QsemcomError("quantized index out of range")
        return self


def segment(row: torch.Tensor, l: int, segment_length: int) -> torch.Tensor:
    """Extract 1-based segment l of length ``segment_length`` from a row vector."""
    if row.ndim != 1:
        raise QsemcomError("segment() expects a 1-D row vector")
    n_segments = row.shape[0] // segment_length
    if row.shape[0] % segment_length != 0:
        raise QsemcomError("row length not divisible by segment length")
    if not 1 <= l <= n_segments:
        raise QsemcomError(f"segment index {l} outside 1..{n_segments}")
    start = (l - 1) * segment_length
    return row[start : start + segment_length]


def _segments_view(values: torch.Tensor, cb: Codebook) -> torch.Tensor:
    if values.shape[-1] != cb.dim:
        raise QsemcomError(
            f"feature dim {values.shape[-1]} does not match codebook dim {cb.dim}"
        )
    return values.reshape(*values.shape[:-1], cb.n_segments, cb.segment_length)

def assign_indices(values: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Nearest-codeword indices, shape (..., L), 1-based.

    torch.argmin returns the first minimal index, which realizes the
    smallest-codeword-index tie rule.
    """
    if not torch.isfinite(values).all():
        raise QsemcomError("cannot quantize non-finite features")
    segs = _segments_view(values.detach(), cb)  # (..., L, N_L)
    diff = segs.unsqueeze(-2) - cb.codewords.detach()  # (..., L, N_cw, N_L)
    dist = diff.square().sum(dim=-1)
    return dist.argmin(dim=-1) + 1


def quantize(aligned: torch.Tensor, cb: Codebook, layer: int = 0) -> QuantizedFeatures:
    if aligned.ndim != 2:
        raise QsemcomError("quantize() expects an N x D matrix")
    return QuantizedFeatures(indices=assign_indices(aligned, cb), layer=layer)


def lookup(indices: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Map 1-based indices (..., L) to concatenated codewords (..., D)."""
    if indices.min() < 1 or indices.max() > cb.n_codewords:
        raise QsemcomError("index out of codebook range")
    flat = indices.long().reshape(-1, cb.n_segments) - 1
    seg_ids = torch.arange(cb.n_segments).unsqueeze(0)
    gathered = cb.codewords[seg_ids, flat]  # (n, L, N_L)
    return gathered.reshape(*indices.shape[:-1], cb.dim)


def dequantize(q: QuantizedFeatures, cb: Codebook) -> torch.Tensor:
    return lookup(q.indices, cb)


class _StraightThrough(torch.autograd.Function):
    """Forward: the quantized values exactly.  Backward: identity to the input."""

    @staticmethod
    def forward(ctx, values: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
        return quantized

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output, None


def straight_through(values: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    return _StraightThrough.apply(values, quantized.detach())


def st_dequantize(aligned: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Quantize-dequantize with a straight-through backward pass.

    The forward value is bitwise dequantize(quantize(aligned)); the gradient
    w.r.t. `aligned` is the downstream gradient unchanged, and the codebook
    receives no gradient through this path.
    """
    indices = assign_indices(aligned, cb)
    quantized = lookup(indices, cb).detach()
    return straight_through(aligned, quantized)


def quantization_loss(
    aligned: list[torch.Tensor] | torch.Tensor,
    cb: Codebook,
    beta: float,
    indices: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Codebook + commitment loss, summed over layers, rows, and segments.

    The first term moves codewords toward (stop-gradient) encoder segments;
    the beta-weighted term moves the encoder toward (stop-gradient) codewords.
    Precomputed nearest-codeword indices may be passed to avoid a re-search.
    """
    if beta < 0:
        raise QsemcomError("beta must be non-negative")
    if isinstance(aligned, torch.Tensor):
        aligned = [aligned]
    total = torch.zeros((), dtype=aligned[0].dtype)
    for k, mat in enumerate(aligned):
        idx = indices[k] if indices is not None else assign_indices(mat, cb)
        segs = _segments_view(mat, cb)
        idx0 = (idx - 1).reshape(-1, cb.n_segments)
        seg_ids = torch.arange(cb.n_segments).unsqueeze(0)
        c_q = cb.codewords[seg_ids, idx0].reshape_as(segs)
        codebook_term = (segs.detach() - c_q).square().sum()
        commit_term = (segs - c_q.detach()).square().sum()
        total = total + codebook_term + beta * commit_term
    return total


# ---------------------------------------------------------------------------
# Codebook lifecycle
# ---------------------------------------------------------------------------


def _dedupe(codewords: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Jitter duplicate codewords until all rows within each segment differ."""
    out = codewords.copy()
    for l in range(out.shape[0]):
        for _ in range(32):
            _, first = np.unique(out[l], axis=0, return_index=True)
            dup = np.setdiff1d(np.arange(out.shape[1]), first)
            if dup.size == 0:
                break
            scale = max(float(np.abs(out[l]).mean()), 1e-3)
            out[l, dup] += rng.normal(0.0, 0.01 * scale, size=out[l, dup].shape).astype(
                out.dtype
            )
    return out


def init_codebook(
    warmup: list[torch.Tensor] | None,
    n_segments: int,
    n_codewords: int,
    segment_length: int,
    seed: int,
    kmeans_iters: int = 25,
) -> Codebook:
    """Per-segment k-means over warmup segments; unit-Gaussian fallback.

    When fewer distinct segments than codewords exist, the table is padded
    with jittered duplicates so all codewords stay distinct (distinctness is
    what makes quantize(dequantize(q)) == q).
    """
    rng = np.random.default_rng(seed)
    if not warmup:
        table = rng.standard_normal((n_segments, n_codewords, segment_length)).astype(
            np.float32
        )
        return Codebook(torch.from_numpy(_dedupe(table, rng)))

    rows = torch.cat([m.detach().reshape(-1, n_segments * segment_length) for m in warmup])
    segs = rows.reshape(-1, n_segments, segment_length).numpy().astype(np.float64)
    table = np.empty((n_segments, n_codewords, segment_length), dtype=np.float32)
    for l in range(n_segments):
        data = segs[:, l, :]
        distinct = np.unique(data, axis=0)
        if distinct.shape[0] < n_codewords:
            pad_idx = rng.integers(0, distinct.shape[0], n_codewords - distinct.shape[0])
            scale = max(float(np.abs(distinct).mean()), 1e-3)
            pad = distinct[pad_idx] + rng.normal(
                0.0, 0.01 * scale, size=(pad_idx.size, segment_length)
            )
            table[l] = np.concatenate([distinct, pad]).astype(np.float32)
            continue
        centroids, _ = kmeans2(
            data, n_codewords, iter=kmeans_iters, minit="++", seed=rng, missing="warn"
        )
        table[l] = centroids.astype(np.float32)
    return Codebook(torch.from_numpy(_dedupe(table, rng)))


def codebook_maintenance(
    usage: torch.Tensor | np.ndarray,
    cb: Codebook,
    threshold_frac: float = 0.01,
    seed: int = 0,
) -> tuple[Codebook, int]:
    """Re-seed codewords whose usage fell below threshold_frac of the uniform
    share, as bounded perturbations of high-usage codewords.  Returns the new
    codebook and the number of revived entries."""
    counts = np.asarray(usage, dtype=np.float64)
    if counts.shape != (cb.n_segments, cb.n_codewords):
        raise QsemcomError("usage counts must be (L, N_cw)")
    rng = np.random.default_rng(seed)
    table = cb.codewords.detach().clone().numpy()
    revived = 0
    for l in range(cb.n_segments):
        total = counts[l].sum()
        if total <= 0:
            continue
        threshold = threshold_frac * total / cb.n_codewords
        dead = np.where(counts[l] < threshold)[0]
        if dead.size == 0:
            continue
        donors = rng.choice(
            cb.n_codewords, size=dead.size, p=counts[l] / total
        )
        for d, donor in zip(dead, donors):
            base = table[l, donor]
            delta = rng.standard_normal(cb.segment_length)
            bound = 0.05 * max(float(np.linalg.norm(base)), 1.0)
            delta *= bound / max(float(np.linalg.norm(delta)), 1e-12)
            table[l, d] = base + delta.astype(np.float32)
            revived += 1
    return Codebook(torch.from_numpy(_dedupe(table, rng))), revived


# ---------------------------------------------------------------------------
# Persistence (binary, little-endian)
# ---------------------------------------------------------------------------


def save_codebook(cb: Codebook, path: str | Path) -> None:
    arr = np.ascontiguousarray(
        cb.codewords.detach().cpu().numpy().astype("<f4", copy=False)
    )
    header = MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, cb.n_segments, cb.n_codewords, cb.segment_length
    )
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_codebook(path: str | Path) -> Codebook:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise QsemcomError(f"not a codebook file: {path}")
    version, n_segments, n_codewords, segment_length = struct.unpack(
        "<IIII", blob[4:20]
    )
    if version != FORMAT_VERSION:
        raise QsemcomError(f"unsupported codebook version {version}")
    expected = n_segments * n_codewords * segment_length * 4
    payload = blob[20:]
    if len(payload) != expected:
        raise QsemcomError("codebook payload size mismatch")
    arr = np.frombuffer(payload, dtype="<f4").reshape(
        n_segments, n_codewords, segment_length
    )
    return Codebook(torch.from_numpy(arr.copy()))
