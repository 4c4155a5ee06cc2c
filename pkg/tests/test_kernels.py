"""Backend equivalence: the numba kernels and the pure-numpy fallbacks must
agree.  The env flag QSEMCOM_NUMBA=0 dispatches to numpy; these tests call
both implementations directly so they run regardless of the flag."""

import subprocess
import sys

import numpy as np
import pytest

from qsemcom.phy import kernels, ldpc, modem


def _llr_args(n, snr_db, seed):
    rng = np.random.default_rng(seed)
    sym = rng.integers(0, 8, n)
    noise_var = 10 ** (-snr_db / 10)
    y = modem.POINTS[sym] + np.sqrt(noise_var / 2) * (
        rng.standard_normal(n) + 1j * rng.standard_normal(n)
    )
    return (
        np.ascontiguousarray(y.real),
        np.ascontiguousarray(y.imag),
        modem.POINTS.real.copy(),
        modem.POINTS.imag.copy(),
        modem.LABELS,
        noise_var,
    )


@pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba backend disabled")
def test_psk_llr_backends_agree():
    args = _llr_args(5000, 6.0, seed=0)
    a = kernels.psk8_llr_numpy(*args)
    b = kernels.psk8_llr_numba(*args)
    assert np.allclose(a, b, rtol=1e-10, atol=1e-10)
    assert np.array_equal(a < 0, b < 0)


def test_psk_llr_numpy_signs_recover_bits():
    rng = np.random.default_rng(1)
    bits = rng.integers(0, 2, 300).astype(np.uint8)
    frame = modem.modulate(bits)
    llr = kernels.psk8_llr_numpy(
        np.ascontiguousarray(frame.samples.real),
        np.ascontiguousarray(frame.samples.imag),
        modem.POINTS.real.copy(),
        modem.POINTS.imag.copy(),
        modem.LABELS,
        1e-6,
    )
    assert np.array_equal((llr.reshape(-1)[: bits.size] < 0).astype(np.uint8), bits)


@pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba backend disabled")
def test_bp_decode_backends_agree():
    code = ldpc.make_ldpc_code(512)
    rng = np.random.default_rng(2)
    es = 10 ** (2.0 / 10)
    for _ in range(12):
        info = rng.integers(0, 2, code.k).astype(np.uint8)
        x = 1.0 - 2.0 * code.encode(info)
        y = x + rng.standard_normal(code.n) / np.sqrt(es)
        llr = 2 * es * y
        bits_np, ok_np = kernels.bp_decode_numpy(
            llr, code.check_vars, code.var_edge_index, 50
        )
        bits_nb, ok_nb = kernels.bp_decode_numba(
            llr, code.check_vars, code.var_edge_index, 50
        )
        assert ok_np == ok_nb
        assert np.array_equal(bits_np, bits_nb)


def test_bp_decode_numpy_early_exit_on_clean_input():
    code = ldpc.make_ldpc_code(512)
    cw = code.encode(np.zeros(code.k, dtype=np.uint8))
    llr = (1.0 - 2.0 * cw) * 30.0
    bits, ok = kernels.bp_decode_numpy(llr, code.check_vars, code.var_edge_index, 50)
    assert ok and np.array_equal(bits, cw)


def test_env_flag_selects_numpy_backend():
    # A subprocess with QSEMCOM_NUMBA=0 must dispatch to the numpy path.
    code = (
        "import os; os.environ['QSEMCOM_NUMBA'] = '0';"
        "from qsemcom.phy import kernels;"
        "assert not kernels.NUMBA_ENABLED;"
        "assert kernels.bp_decode is not None;"
        "import numpy as np;"
        "from qsemcom.phy import ldpc;"
        "c = ldpc.make_ldpc_code(512);"
        "cw = c.encode(np.zeros(c.k, dtype=np.uint8));"
        "llr = (1.0 - 2.0 * cw) * 30.0;"
        "bits, ok = kernels.bp_decode(llr, c.check_vars, c.var_edge_index, 50);"
        "assert ok and np.array_equal(bits, cw);"
        "print('numpy-fallback-ok')"
    )
    result = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, timeout=300
    )
    assert result.returncode == 0, result.stderr
    assert "numpy-fallback-ok" in result.stdout
