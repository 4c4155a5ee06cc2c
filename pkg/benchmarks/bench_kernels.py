#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py
The env flag QSEMCOM_NUMBA only affects which backend the package dispatches
to; this script times both explicitly.
"""

import time

import numpy as np

from qsemcom.phy import kernels, ldpc, modem


def _time(fn, *args, repeat=5):
    fn(*args)  # warm-up (and JIT compile for the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_psk_llr(n_symbols=200_000, snr_db=5.0):
    rng = np.random.default_rng(0)
    sym = rng.integers(0, 8, n_symbols)
    noise_var = 10 ** (-snr_db / 10)
    y = modem.POINTS[sym] + np.sqrt(noise_var / 2) * (
        rng.standard_normal(n_symbols) + 1j * rng.standard_normal(n_symbols)
    )
    args = (
        np.ascontiguousarray(y.real),
        np.ascontiguousarray(y.imag),
        modem.POINTS.real.copy(),
        modem.POINTS.imag.copy(),
        modem.LABELS,
        noise_var,
    )
    t_np = _time(kernels.psk8_llr_numpy, *args)
    row = [f"psk8_llr ({n_symbols} symbols)", f"{t_np*1e3:9.1f} ms"]
    if kernels.NUMBA_ENABLED:
        t_nb = _time(kernels.psk8_llr_numba, *args)
        row += [f"{t_nb*1e3:9.1f} ms", f"x{t_np/t_nb:5.1f}"]
    else:
        row += ["       n/a", "  n/a"]
    print(" | ".join(row))


def bench_bp_decode(n_blocks=20, snr_db=2.0):
    code = ldpc.make_ldpc_code(1024)
    rng = np.random.default_rng(1)
    es = 10 ** (snr_db / 10)
    llrs = []
    for _ in range(n_blocks):
        info = rng.integers(0, 2, code.k).astype(np.uint8)
        x = 1.0 - 2.0 * code.encode(info)
        y = x + rng.standard_normal(code.n) / np.sqrt(es)
        llrs.append(2.0 * es * y)

    def run(decoder):
        for llr in llrs:
            decoder(llr, code.check_vars, code.var_edge_index, 50)

    t_np = _time(run, kernels.bp_decode_numpy, repeat=3)
    row = [f"bp_decode ({n_blocks} blocks n=1024)", f"{t_np*1e3:9.1f} ms"]
    if kernels.NUMBA_ENABLED:
        t_nb = _time(run, kernels.bp_decode_numba, repeat=3)
        row += [f"{t_nb*1e3:9.1f} ms", f"x{t_np/t_nb:5.1f}"]
    else:
        row += ["       n/a", "  n/a"]
    print(" | ".join(row))


def main():
    backend = "numba" if kernels.NUMBA_ENABLED else "numpy only (numba disabled)"
    print(f"dispatch backend: {backend}")
    print(f"{'kernel':34} | {'numpy':>12} | {'numba':>12} | speedup")
    bench_psk_llr()
    bench_bp_decode()


if __name__ == "__main__":
    main()
