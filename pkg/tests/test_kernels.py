import os
import subprocess
import sys

import numpy as np
import pytest

from ltla import kernels

RNG = np.random.default_rng(123)


def _rows(r, c):
    raw = RNG.uniform(0.05, 1.0, size=(r, c))
    return raw / raw.sum(axis=1, keepdims=True)


needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")


@needs_numba
def test_dfa_table_sweep_paths_agree():
    H, S, V = 5, 4, 3
    trans, emis = _rows(H, H), _rows(H, V)
    table_next = RNG.uniform(size=(H, S))
    delta = RNG.integers(0, S, size=(S, V))
    a = kernels.dfa_table_sweep_numpy(table_next, trans, emis, delta)
    b = kernels.dfa_table_sweep_numba(table_next, trans, emis, delta)
    assert np.abs(a - b).max() < 1e-14


@needs_numba
def test_filter_batch_paths_agree():
    H, V, N, T = 4, 3, 20, 9
    init = _rows(1, H)[0]
    trans, emis = _rows(H, H), _rows(H, V)
    seqs = RNG.integers(0, V, size=(N, T))
    a_post, a_ll = kernels.filter_batch_numpy(seqs, init, trans, emis)
    b_post, b_ll = kernels.filter_batch_numba(seqs, init, trans, emis)
    assert np.abs(a_post - b_post).max() < 1e-13
    assert np.abs(a_ll - b_ll).max() < 1e-11


@needs_numba
def test_em_accumulate_paths_agree():
    H, V, N, T = 3, 4, 15, 7
    init = _rows(1, H)[0]
    trans, emis = _rows(H, H), _rows(H, V)
    seqs = RNG.integers(0, V, size=(N, T))
    outs_np = kernels.em_accumulate_numpy(seqs, init, trans, emis)
    outs_nb = kernels.em_accumulate_numba(seqs, init, trans, emis)
    for a, b in zip(outs_np, outs_nb):
        assert np.abs(np.asarray(a) - np.asarray(b)).max() < 1e-10


@needs_numba
def test_backward_batch_paths_agree():
    H, V, N, T = 4, 2, 12, 6
    trans, emis = _rows(H, H), _rows(H, V)
    seqs = RNG.integers(0, V, size=(N, T))
    a_u, a_ls = kernels.backward_batch_numpy(seqs, trans, emis)
    b_u, b_ls = kernels.backward_batch_numba(seqs, trans, emis)
    assert np.abs(a_u - b_u).max() < 1e-13
    assert np.abs(a_ls - b_ls).max() < 1e-11


def test_em_accumulate_counts_are_consistent():
    """Expected counts must marginalize correctly: transitions sum to T-1
    per sequence, emissions to T, initial to 1."""
    H, V, N, T = 3, 3, 8, 5
    init = _rows(1, H)[0]
    trans, emis = _rows(H, H), _rows(H, V)
    seqs = RNG.integers(0, V, size=(N, T))
    init_acc, trans_acc, emis_acc, loglik = kernels.em_accumulate_numpy(seqs, init, trans, emis)
    assert abs(init_acc.sum() - N) < 1e-9
    assert abs(trans_acc.sum() - N * (T - 1)) < 1e-9
    assert abs(emis_acc.sum() - N * T) < 1e-9
    _, ll = kernels.filter_batch_numpy(seqs, init, trans, emis)
    assert abs(loglik - ll.sum()) < 1e-9


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, LTLA_PURE_NUMPY="1")
    out = subprocess.run(
        [sys.executable, "-c", "from ltla import kernels; print(kernels.backend())"],
        capture_output=True,
        text=True,
        env=env,
    )
    assert out.stdout.strip() == "numpy"


def test_default_backend_prefers_numba_when_available():
    if kernels.HAS_NUMBA and os.environ.get("LTLA_PURE_NUMPY", "") not in {"1", "true", "yes"}:
        assert kernels.backend() == "numba"
