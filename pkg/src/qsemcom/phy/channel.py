"""Flat-fading channel simulation, the full transmit round trip, the fast
index-level surrogate used during training, and its calibration table.

SNR is defined as E|h|^2 * P / sigma^2 with unit transmit power P, so the
noise variance at nominal snr_db is sigma^2 = E|h|^2 / 10^(snr_db/10).
The gain h is drawn once per frame (block fading) from CN(0, 1).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ChannelError
from . import ldpc as ldpc_mod
from .modem import (
    ModulatedFrame,
    bits_to_indices,
    hard_bits,
    indices_to_bits,
    modulate,
    soft_demodulate,
)

SCHEMES = ("none", "repetition-3", "ldpc-3-6")


@dataclass
class ChannelState:
    snr_db: float
    fading: bool = True
    h: complex | None = None  # pinned gain; None draws per frame when fading

    @property
    def noise_var(self) -> float:
        if np.isinf(self.snr_db):
            return 0.0
        mean_gain = abs(self.h) ** 2 if self.h is not None else 1.0
        return mean_gain / (10.0 ** (self.snr_db / 10.0))


def draw_gain(state: ChannelState, rng: np.random.Generator) -> complex:
    if state.h is not None:
        return state.h
    if not state.fading:
        return 1.0 + 0.0j
    re, im = rng.standard_normal(2)
    return complex(re, im) / np.sqrt(2.0)


def apply_channel(
    frame: ModulatedFrame, state: ChannelState, rng: np.random.Generator
) -> tuple[ModulatedFrame, complex]:
    """y = h*x + n with n ~ CN(0, sigma^2 I); returns the received frame and h."""
    h = draw_gain(state, rng)
    sigma2 = state.noise_var
    samples = h * frame.samples
    if sigma2 > 0:
        scale = np.sqrt(sigma2 / 2.0)
        noise = scale * (
            rng.standard_normal(samples.shape) + 1j * rng.standard_normal(samples.shape)
        )
        samples = samples + noise
    return ModulatedFrame(samples=samples, n_bits=frame.n_bits, scheme=frame.scheme), h


def _encode_bits(bits: np.ndarray, scheme: str, code: ldpc_mod.LdpcCode | None):
    if scheme == "none":
        return bits, bits.size
    if scheme == "repetition-3":
        return np.repeat(bits, 3), bits.size
    if scheme == "ldpc-3-6":
        assert code is not None
        n_info = bits.size
        pad = (-n_info) % code.k
        padded = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
        blocks = padded.reshape(-1, code.k)
        coded = np.concatenate([code.encode(b) for b in blocks])
        return coded, n_info
    raise ChannelError(f"unknown coding scheme {scheme!r}")


def _decode_llr(
    llr: np.ndarray, scheme: str, n_info: int, code: ldpc_mod.LdpcCode | None
) -> np.ndarray:
    if scheme == "none":
        return hard_bits(llr)[:n_info]
    if scheme == "repetition-3":
        combined = llr.reshape(-1, 3).sum(axis=1)
        return hard_bits(combined)[:n_info]
    if scheme == "ldpc-3-6":
        assert code is not None
        blocks = llr.reshape(-1, code.n)
        info = np.concatenate([code.decode(b) for b in blocks])
        return info[:n_info]
    raise ChannelError(f"unknown coding scheme {scheme!r}")


def channel_encode(
    s: np.ndarray,
    n_codewords: int,
    scheme: str,
    ldpc_block_length: int = ldpc_mod.DEFAULT_BLOCK_LENGTH,
) -> tuple[np.ndarray, int]:
    """Symbol indices to a coded bit frame; returns (bits, n_info_bits)."""
    code = (
        ldpc_mod.make_ldpc_code(ldpc_block_length) if scheme == "ldpc-3-6" else None
    )
    bits = indices_to_bits(s, n_codewords)
    return _encode_bits(bits, scheme, code)


def transmit(
    s: np.ndarray,
    state: ChannelState,
    scheme: str,
    rng: np.random.Generator,
    n_codewords: int,
    ldpc_block_length: int = ldpc_mod.DEFAULT_BLOCK_LENGTH,
) -> np.ndarray:
    """Full physical-layer round trip: code, modulate, fade, demodulate, decode.

    With sigma^2 = 0 this is the identity on symbol vectors for every scheme.
    """
    if scheme not in SCHEMES:
        raise ChannelError(f"unknown coding scheme {scheme!r}")
    s = np.asarray(s, dtype=np.int64)
    code = (
        ldpc_mod.make_ldpc_code(ldpc_block_length) if scheme == "ldpc-3-6" else None
    )
    bits = indices_to_bits(s, n_codewords)
    coded, n_info = _encode_bits(bits, scheme, code)
    frame = modulate(coded)
    received, h = apply_channel(frame, state, rng)
    if h == 0:
        # Erasure: the demodulator can only guess.
        guess = rng.integers(1, n_codewords + 1, size=s.size)
        return guess.astype(np.int64)
    llr = soft_demodulate(received.samples, h, state.noise_var, received.n_bits)
    decoded = _decode_llr(llr, scheme, n_info, code)
    return bits_to_indices(decoded, n_codewords)


def index_error_channel(
    s: np.ndarray, p_e: float, rng: np.random.Generator, n_codewords: int
) -> np.ndarray:
    """Training surrogate: each index is independently replaced, with
    probability p_e, by a uniform draw from the other n_codewords-1 indices."""
    if not 0.0 <= p_e <= 1.0:
        raise ChannelError("p_e must lie in [0, 1]")
    s = np.asarray(s, dtype=np.int64)
    out = s.copy()
    flips = rng.random(s.size) < p_e
    n_flips = int(flips.sum())
    if n_flips:
        offsets = rng.integers(1, n_codewords, size=n_flips)
        out[flips] = (s[flips] - 1 + offsets) % n_codewords + 1
    return out


def measure_index_error_rate(
    scheme: str,
    snr_db: float,
    n_codewords: int,
    rng: np.random.Generator,
    n_indices: int = 20000,
    frame_len: int = 512,
    fading: bool = True,
    ldpc_block_length: int = ldpc_mod.DEFAULT_BLOCK_LENGTH,
) -> float:
    """Monte-Carlo index error rate of `transmit` at one operating point."""
    state = ChannelState(snr_db=snr_db, fading=fading)
    errors = 0
    total = 0
    while total < n_indices:
        n = min(frame_len, n_indices - total)
        s = rng.integers(1, n_codewords + 1, size=n).astype(np.int64)
        s_hat = transmit(
            s, state, scheme, rng, n_codewords, ldpc_block_length=ldpc_block_length
        )
        errors += int((s_hat != s).sum())
        total += n
    return errors / total


# Fixed-gain calibration grid for the training surrogate.  Per-step fading is
# realized by shifting the nominal SNR by the drawn |h|^2 and interpolating.
CALIBRATION_GRID_DB = tuple(float(v) for v in range(-10, 31, 2))


@dataclass
class CalibrationTable:
    """Measured index error rates keyed by (scheme, snr_db)."""

    rows: dict[tuple[str, float], tuple[float, int]] = field(default_factory=dict)

    def get(self, scheme: str, snr_db: float) -> float:
        key = (scheme, round(float(snr_db), 4))
        if key not in self.rows:
            raise ChannelError(
                f"no calibration entry for scheme={scheme} snr={snr_db} dB"
            )
        return self.rows[key][0]

    def interp(self, scheme: str, snr_db: float) -> float:
        """Linear interpolation over this scheme's measured points, clamped at
        the grid ends."""
        points = sorted(
            (snr, p_e)
            for (sch, snr), (p_e, _) in self.rows.items()
            if sch == scheme and np.isfinite(snr)
        )
        if not points:
            raise ChannelError(f"no calibration entries for scheme={scheme}")
        snrs = np.array([p[0] for p in points])
        rates = np.array([p[1] for p in points])
        return float(np.interp(snr_db, snrs, rates))

    def put(self, scheme: str, snr_db: float, p_e: float, n_trials: int) -> None:
        self.rows[(scheme, round(float(snr_db), 4))] = (float(p_e), int(n_trials))

    def ensure(
        self,
        scheme: str,
        snr_grid_db: tuple[float, ...],
        n_codewords: int,
        seed: int,
        n_indices: int = 20000,
        fading: bool = False,
        ldpc_block_length: int = ldpc_mod.DEFAULT_BLOCK_LENGTH,
    ) -> "CalibrationTable":
        for snr in snr_grid_db:
            key = (scheme, round(float(snr), 4))
            if key in self.rows:
                continue
            if np.isinf(snr):
                # Noiseless transmission is the exact identity for all schemes.
                self.put(scheme, snr, 0.0, 0)
                continue
            rng = np.random.default_rng(
                (seed, int(round(snr * 100)) + 10**6, zlib.crc32(scheme.encode()))
            )
            p_e = measure_index_error_rate(
                scheme,
                snr,
                n_codewords,
                rng,
                n_indices=n_indices,
                fading=fading,
                ldpc_block_length=ldpc_block_length,
            )
            self.put(scheme, snr, p_e, n_indices)
        return self

    def save(self, path: str | Path) -> None:
        lines = ["scheme\tsnr_db\tindex_error_rate\tn_trials"]
        for (scheme, snr), (p_e, n) in sorted(self.rows.items()):
            lines.append(f"{scheme}\t{snr:g}\t{p_e:.8f}\t{n}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationTable":
        table = cls()
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            scheme, snr, p_e, n = line.split("\t")
            table.put(scheme, float(snr), float(p_e), int(n))
        return table
