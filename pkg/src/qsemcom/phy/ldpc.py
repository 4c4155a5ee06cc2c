"""Regular (3,6) rate-1/2 LDPC code: random construction, GF(2) systematic
encoding, and belief-propagation decoding via the kernels module.

The parity-check matrix is built from a seeded socket permutation (column
weight 3, row weight 6) with duplicate-edge repair.  Encoding solves the
parity equations from the reduced row echelon form of H, so any full- or
deficient-rank construction encodes consistently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ChannelError
from . import kernels

COL_WEIGHT = 3
ROW_WEIGHT = 6
DEFAULT_BLOCK_LENGTH = 1024
DEFAULT_SEED = 20240
MAX_BP_ITERS = 50


@dataclass
class LdpcCode:
    n: int  # block length
    k: int  # info bits per block
    check_vars: np.ndarray  # (m, ROW_WEIGHT) int64: variable of each edge
    var_edge_index: np.ndarray  # (n, COL_WEIGHT) int64: flat edge ids per variable
    pivot_cols: np.ndarray  # (r,) columns solved by parity equations
    free_cols: np.ndarray  # (k,) columns carrying info bits
    parity_gen: np.ndarray  # (r, k) uint8: c[pivot] = parity_gen @ u mod 2

    @property
    def rate(self) -> float:
        return self.k / self.n

    def encode(self, info: np.ndarray) -> np.ndarray:
        if info.size != self.k:
            raise ChannelError(f"expected {self.k} info bits, got {info.size}")
        code = np.zeros(self.n, dtype=np.uint8)
        code[self.free_cols] = info
        code[self.pivot_cols] = (self.parity_gen @ info.astype(np.uint8)) & 1
        return code

    def decode(self, llr: np.ndarray, max_iters: int = MAX_BP_ITERS) -> np.ndarray:
        if llr.size != self.n:
            raise ChannelError(f"expected {self.n} LLRs, got {llr.size}")
        hard, _ = kernels.bp_decode(
            np.ascontiguousarray(llr, dtype=np.float64),
            self.check_vars,
            self.var_edge_index,
            max_iters,
        )
        return hard[self.free_cols]


def _build_edges(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random regular bipartite graph as check_vars (m, ROW_WEIGHT)."""
    m = n * COL_WEIGHT // ROW_WEIGHT
    for _ in range(64):
        var_sockets = rng.permutation(np.repeat(np.arange(n), COL_WEIGHT))
        check_vars = var_sockets.reshape(m, ROW_WEIGHT)
        # Repair parallel edges (same variable twice on one check) by swapping
        # with entries from other checks.
        ok = True
        for c in range(m):
            for _attempt in range(200):
                row = check_vars[c]
                if np.unique(row).size == ROW_WEIGHT:
                    break
                dup_pos = _first_dup(row)
                c2 = int(rng.integers(0, m))
                j2 = int(rng.integers(0, ROW_WEIGHT))
                if c2 == c:
                    continue
                check_vars[c, dup_pos], check_vars[c2, j2] = (
                    check_vars[c2, j2],
                    check_vars[c, dup_pos],
                )
            else:
                ok = False
                break
        if ok and all(
            np.unique(check_vars[c]).size == ROW_WEIGHT for c in range(m)
        ):
            return check_vars.astype(np.int64)
    raise ChannelError("failed to build a simple regular graph")


def _first_dup(row: np.ndarray) -> int:
    seen = set()
    for j, v in enumerate(row):
        if v in seen:
            return j
        seen.add(int(v))
    return 0


def _rref_gf2(h: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2); returns (rref, pivot columns)."""
    a = h.copy().astype(np.uint8)
    m, n = a.shape
    pivots: list[int] = []
    row = 0
    for col in range(n):
        if row >= m:
            break
        hits = np.nonzero(a[row:, col])[0]
        if hits.size == 0:
            continue
        swap = row + hits[0]
        if swap != row:
            a[[row, swap]] = a[[swap, row]]
        others = np.nonzero(a[:, col])[0]
        others = others[others != row]
        a[others] ^= a[row]
        pivots.append(col)
        row += 1
    return a[: len(pivots)], pivots


@lru_cache(maxsize=8)
def make_ldpc_code(n: int = DEFAULT_BLOCK_LENGTH, seed: int = DEFAULT_SEED) -> LdpcCode:
    if (n * COL_WEIGHT) % ROW_WEIGHT != 0:
        raise ChannelError("block length incompatible with (3,6) regularity")
    rng = np.random.default_rng(seed)
    check_vars = _build_edges(n, rng)
    m = check_vars.shape[0]

    h = np.zeros((m, n), dtype=np.uint8)
    h[np.repeat(np.arange(m), ROW_WEIGHT), check_vars.reshape(-1)] = 1

    rref, pivots = _rref_gf2(h)
    pivot_cols = np.array(pivots, dtype=np.int64)
    free_cols = np.setdiff1d(np.arange(n, dtype=np.int64), pivot_cols)
    parity_gen = rref[:, free_cols].astype(np.uint8)

    # Edge ids per variable, grouped (variable, ascending edge id).
    flat_vars = check_vars.reshape(-1)
    order = np.argsort(flat_vars, kind="stable")
    var_edge_index = order.reshape(n, COL_WEIGHT).astype(np.int64)

    return LdpcCode(
        n=n,
        k=int(free_cols.size),
        check_vars=check_vars,
        var_edge_index=var_edge_index,
        pivot_cols=pivot_cols,
        free_cols=free_cols,
        parity_gen=parity_gen,
    )
