"""Hot physical-layer kernels with two interchangeable backends.

The loop implementations are compiled with numba's @njit; the vectorized
numpy versions are the pure-numpy fallback.  Selection happens at import
time: set ``QSEMCOM_NUMBA=0`` to force the numpy path (default is numba when
importable).  ``benchmarks/bench_kernels.py`` compares the two.

Bit convention: LLR = log P(bit=0) - log P(bit=1), so positive LLR means 0.
"""

from __future__ import annotations

import math
import os

import numpy as np

_ENV = os.environ.get("QSEMCOM_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _ENV not in ("0", "false", "off", "no")

if NUMBA_REQUESTED:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

_LLR_CLIP = 30.0
_TANH_CLIP = 0.999999999999


# ---------------------------------------------------------------------------
# 8-PSK soft demodulation
# ---------------------------------------------------------------------------


def psk8_llr_numpy(
    y_re: np.ndarray,
    y_im: np.ndarray,
    points_re: np.ndarray,
    points_im: np.ndarray,
    labels: np.ndarray,
    noise_var: float,
) -> np.ndarray:
    """Exact per-bit LLRs for an equalized 8-PSK symbol stream.

    labels[k] is the 3-bit label of constellation point k.  Returns (n, 3).
    """
    d2 = (y_re[:, None] - points_re[None, :]) ** 2 + (
        y_im[:, None] - points_im[None, :]
    ) ** 2
    metric = -d2 / max(noise_var, 1e-300)  # log-likelihood up to a constant
    llr = np.empty((y_re.shape[0], 3), dtype=np.float64)
    for bit in range(3):
        mask1 = ((labels >> (2 - bit)) & 1).astype(bool)
        m0 = metric[:, ~mask1]
        m1 = metric[:, mask1]
        max0 = m0.max(axis=1)
        max1 = m1.max(axis=1)
        lse0 = max0 + np.log(np.exp(m0 - max0[:, None]).sum(axis=1))
        lse1 = max1 + np.log(np.exp(m1 - max1[:, None]).sum(axis=1))
        llr[:, bit] = lse0 - lse1
    return np.clip(llr, -_LLR_CLIP, _LLR_CLIP)


def _psk8_llr_loops(y_re, y_im, points_re, points_im, labels, noise_var):
    n = y_re.shape[0]
    inv = 1.0 / max(noise_var, 1e-300)
    llr = np.empty((n, 3), dtype=np.float64)
    metric = np.empty(8, dtype=np.float64)
    for i in range(n):
        for k in range(8):
            dre = y_re[i] - points_re[k]
            dim = y_im[i] - points_im[k]
            metric[k] = -(dre * dre + dim * dim) * inv
        for bit in range(3):
            max0 = -1e300
            max1 = -1e300
            for k in range(8):
                if (labels[k] >> (2 - bit)) & 1:
                    if metric[k] > max1:
                        max1 = metric[k]
                elif metric[k] > max0:
                    max0 = metric[k]
            s0 = 0.0
            s1 = 0.0
            for k in range(8):
                if (labels[k] >> (2 - bit)) & 1:
                    s1 += math.exp(metric[k] - max1)
                else:
                    s0 += math.exp(metric[k] - max0)
            value = (max0 + math.log(s0)) - (max1 + math.log(s1))
            if value > _LLR_CLIP:
                value = _LLR_CLIP
            elif value < -_LLR_CLIP:
                value = -_LLR_CLIP
            llr[i, bit] = value
    return llr


# ---------------------------------------------------------------------------
# LDPC belief propagation (sum-product) on a regular Tanner graph
# ---------------------------------------------------------------------------
#
# Edge layout: edges are grouped by check node.  check_vars[c, j] is the
# variable index of edge c*row_w + j; var_edge_index[v, t] lists, for each
# variable v, the flat ids of its incident edges.


def bp_decode_numpy(
    llr: np.ndarray,
    check_vars: np.ndarray,
    var_edge_index: np.ndarray,
    max_iters: int,
) -> tuple[np.ndarray, bool]:
    """Decode one block; returns (hard bits, syndrome satisfied)."""
    n_checks, row_w = check_vars.shape
    hard = (llr < 0).astype(np.uint8)
    if not (hard[check_vars].sum(axis=1) % 2).any():
        return hard, True
    var_to_check = llr[check_vars].astype(np.float64)
    for _ in range(max_iters):
        t = np.tanh(0.5 * np.clip(var_to_check, -_LLR_CLIP, _LLR_CLIP))
        t[t == 0.0] = 1e-12
        prod = t.prod(axis=1, keepdims=True)
        ratio = np.clip(prod / t, -_TANH_CLIP, _TANH_CLIP)
        check_to_var = 2.0 * np.arctanh(ratio)
        incoming = check_to_var.reshape(-1)[var_edge_index]  # (n_vars, col_w)
        total = llr + incoming.sum(axis=1)
        hard = (total < 0).astype(np.uint8)
        if not (hard[check_vars].sum(axis=1) % 2).any():
            return hard, True
        outgoing = total[:, None] - incoming
        flat = np.empty(n_checks * row_w, dtype=np.float64)
        flat[var_edge_index.reshape(-1)] = outgoing.reshape(-1)
        var_to_check = flat.reshape(n_checks, row_w)
    return hard, False


def _bp_decode_loops(llr, check_vars, var_edge_index, max_iters):
    n_checks, row_w = check_vars.shape
    n_vars, col_w = var_edge_index.shape
    hard = np.empty(n_vars, dtype=np.uint8)
    for v in range(n_vars):
        hard[v] = 1 if llr[v] < 0 else 0
    ok = True
    for c in range(n_checks):
        acc = 0
        for j in range(row_w):
            acc ^= hard[check_vars[c, j]]
        if acc:
            ok = False
            break
    if ok:
        return hard, True
    flat_c2v = np.empty(n_checks * row_w, dtype=np.float64)
    var_to_check = np.empty((n_checks, row_w), dtype=np.float64)
    for c in range(n_checks):
        for j in range(row_w):
            var_to_check[c, j] = llr[check_vars[c, j]]
    check_to_var = np.empty((n_checks, row_w), dtype=np.float64)
    for _ in range(max_iters):
        for c in range(n_checks):
            prod = 1.0
            for j in range(row_w):
                x = var_to_check[c, j]
                if x > _LLR_CLIP:
                    x = _LLR_CLIP
                elif x < -_LLR_CLIP:
                    x = -_LLR_CLIP
                t = math.tanh(0.5 * x)
                if t == 0.0:
                    t = 1e-12
                check_to_var[c, j] = t
                prod *= t
            for j in range(row_w):
                ratio = prod / check_to_var[c, j]
                if ratio > _TANH_CLIP:
                    ratio = _TANH_CLIP
                elif ratio < -_TANH_CLIP:
                    ratio = -_TANH_CLIP
                value = 2.0 * math.atanh(ratio)
                check_to_var[c, j] = value
                flat_c2v[c * row_w + j] = value
        ok = True
        for v in range(n_vars):
            total = llr[v]
            for t_i in range(col_w):
                total += flat_c2v[var_edge_index[v, t_i]]
            hard[v] = 1 if total < 0 else 0
        for c in range(n_checks):
            acc = 0
            for j in range(row_w):
                acc ^= hard[check_vars[c, j]]
            if acc:
                ok = False
                break
        if ok:
            return hard, True
        for v in range(n_vars):
            total = llr[v]
            for t_i in range(col_w):
                total += flat_c2v[var_edge_index[v, t_i]]
            for t_i in range(col_w):
                e = var_edge_index[v, t_i]
                var_to_check[e // row_w, e % row_w] = total - flat_c2v[e]
    return hard, False


if NUMBA_ENABLED:
    psk8_llr_numba = njit(cache=True)(_psk8_llr_loops)
    bp_decode_numba = njit(cache=True)(_bp_decode_loops)
else:
    psk8_llr_numba = None
    bp_decode_numba = None


def psk8_llr(y_re, y_im, points_re, points_im, labels, noise_var):
    if NUMBA_ENABLED:
        return psk8_llr_numba(y_re, y_im, points_re, points_im, labels, noise_var)
    return psk8_llr_numpy(y_re, y_im, points_re, points_im, labels, noise_var)


def bp_decode(llr, check_vars, var_edge_index, max_iters):
    if NUMBA_ENABLED:
        return bp_decode_numba(llr, check_vars, var_edge_index, max_iters)
    return bp_decode_numpy(llr, check_vars, var_edge_index, max_iters)
