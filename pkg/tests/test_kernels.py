"""The numba and numpy kernel backends must agree."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmud import kernels
from csmud.kernels import _np

nb = pytest.importorskip("csmud.kernels._nb")


def test_backend_name():
    assert kernels.BACKEND in ("numba", "numpy")


@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_block_energies_parity(L, K, seed):
    x = np.random.default_rng(seed).standard_normal(K * L) + 1j
    np.testing.assert_allclose(nb.block_energies(x, L), _np.block_energies(x, L), rtol=1e-12)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.data())
@settings(max_examples=60, deadline=None)
def test_top_blocks_tie_rule_parity(vals, data):
    e = np.array(vals, dtype=np.float64)
    keep = data.draw(st.integers(1, len(vals)))
    a, b = nb.top_blocks(e, keep), _np.top_blocks(e, keep)
    assert list(a) == list(b)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1), st.data())
@settings(max_examples=40, deadline=None)
def test_block_threshold_parity(L, K, seed, data):
    keep = data.draw(st.integers(1, K))
    g = np.random.default_rng(seed).standard_normal(K * L).astype(np.complex128)
    np.testing.assert_array_equal(nb.block_threshold(g, L, keep), _np.block_threshold(g, L, keep))


@pytest.mark.parametrize("L,keep", [(1, 3), (2, 2), (3, 1)])
def test_iht_loop_parity(L, keep):
    rng = np.random.default_rng(L)
    K, M = 8, 10
    S = (rng.standard_normal((M, K * L)) + 1j * rng.standard_normal((M, K * L))) / np.sqrt(M)
    y = S[:, :L] @ rng.standard_normal(L) + 0.01 * rng.standard_normal(M)
    y = y.astype(np.complex128)
    SH = np.ascontiguousarray(S.conj().T)
    mu = 1.0 / np.linalg.norm(S, 2) ** 2
    xa, ia, da = nb.iht_loop(S, SH, y, mu, L, keep, 100, 1e-6)
    xb, ib, db = _np.iht_loop(S, SH, y, mu, L, keep, 100, 1e-6)
    assert (ia, da) == (ib, db)
    np.testing.assert_allclose(xa, xb, rtol=1e-9, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_block_layer_parity(L, K, seed):
    rng = np.random.default_rng(seed)
    z = rng.integers(-2, 3, size=(3, K * L)).astype(np.float64)  # many ties and zeros
    g = rng.standard_normal((3, K * L))
    oa, ma = nb.block_activation_forward(z, L)
    ob, mb = _np.block_activation_forward(z, L)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ma, mb)
    np.testing.assert_array_equal(nb.block_activation_backward(g, ma, L),
                                  _np.block_activation_backward(g, mb, L))
    pa, ia = nb.block_max_pool_forward(z, L)
    pb, ib = _np.block_max_pool_forward(z, L)
    np.testing.assert_array_equal(pa, pb)
    np.testing.assert_array_equal(ia, ib)
    gp = rng.standard_normal((3, K))
    np.testing.assert_array_equal(nb.block_max_pool_backward(gp, ia, K * L),
                                  _np.block_max_pool_backward(gp, ib, K * L))


def test_env_flag_selects_numpy():
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c", "from csmud import kernels; print(kernels.BACKEND)"],
        env={**__import__("os").environ, "CSMUD_NUMBA": "0"},
        capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
