"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The active backend is chosen once at import: numba when importable, numpy
when it is not or when the environment variable ``LTLA_PURE_NUMPY`` is set
to ``1``/``true``/``yes``. Both implementations of every kernel are kept
importable so tests and ``ltla bench --what kernels`` can compare them
directly regardless of the active backend.

All kernels operate on dense float64 arrays; structured (Monarch) operators
are handled by the dedicated monarch_* kernels.
"""

import os

import numpy as np

_FLAG = os.environ.get("LTLA_PURE_NUMPY", "").strip().lower()
_FORCE_NUMPY = _FLAG in {"1", "true", "yes"}

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_USE_NUMBA = HAS_NUMBA and not _FORCE_NUMPY


def backend() -> str:
    """Name of the backend the dispatching wrappers use."""
    return "numba" if _USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# DFA lookahead sweep: one backward layer of the constraint table.
# table_prev[z, s] = sum_{z'} A[z, z'] * sum_x B[z', x] * table_next[z', delta[s, x]]


def dfa_table_sweep_numpy(table_next, trans, emis, delta):
    gathered = table_next[:, delta]  # (H, S, V)
    inner = np.einsum("hv,hsv->hs", emis, gathered)
    return trans @ inner


@njit(cache=True)
def _dfa_table_sweep_nb(table_next, trans, emis, delta):
    H, S = table_next.shape
    V = emis.shape[1]
    inner = np.zeros((H, S))
    for s in range(S):
        for z in range(H):
            acc = 0.0
            for x in range(V):
                acc += emis[z, x] * table_next[z, delta[s, x]]
            inner[z, s] = acc
    out = np.zeros((H, S))
    for z in range(H):
        for s in range(S):
            acc = 0.0
            for z2 in range(H):
                acc += trans[z, z2] * inner[z2, s]
            out[z, s] = acc
    return out


def dfa_table_sweep_numba(table_next, trans, emis, delta):
    return _dfa_table_sweep_nb(
        np.ascontiguousarray(table_next),
        np.ascontiguousarray(trans),
        np.ascontiguousarray(emis),
        np.ascontiguousarray(delta, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Batched HMM filtering over equal-length sequences.
# Returns the final normalized posterior per sequence and log p(sequence).
# A zero-mass step yields loglik -inf and a uniform posterior; training and
# decoding paths never hit that branch, scoring paths use their own floor.


def filter_batch_numpy(seqs, initial, trans, emis):
    N, T = seqs.shape
    H = initial.shape[0]
    alpha = initial[None, :] * emis[:, seqs[:, 0]].T
    loglik = np.zeros(N)
    for t in range(T):
        if t > 0:
            alpha = (alpha @ trans) * emis[:, seqs[:, t]].T
        mass = alpha.sum(axis=1)
        ok = mass > 0.0
        with np.errstate(divide="ignore"):
            loglik += np.where(ok, np.log(np.maximum(mass, 1e-300)), -np.inf)
        alpha = np.where(ok[:, None], alpha / np.maximum(mass, 1e-300)[:, None], 1.0 / H)
    return alpha, loglik


@njit(cache=True)
def _filter_batch_nb(seqs, initial, trans, emis):
    N, T = seqs.shape
    H = initial.shape[0]
    alpha = np.zeros((N, H))
    loglik = np.zeros(N)
    cur = np.zeros(H)
    nxt = np.zeros(H)
    for n in range(N):
        for z in range(H):
            cur[z] = initial[z] * emis[z, seqs[n, 0]]
        ll = 0.0
        for t in range(T):
            if t > 0:
                x = seqs[n, t]
                for z2 in range(H):
                    acc = 0.0
                    for z in range(H):
                        acc += cur[z] * trans[z, z2]
                    nxt[z2] = acc * emis[z2, x]
                for z in range(H):
                    cur[z] = nxt[z]
            mass = 0.0
            for z in range(H):
                mass += cur[z]
            if mass > 0.0:
                ll += np.log(mass)
                for z in range(H):
                    cur[z] /= mass
            else:
                ll = -np.inf
                for z in range(H):
                    cur[z] = 1.0 / H
        for z in range(H):
            alpha[n, z] = cur[z]
        loglik[n] = ll
    return alpha, loglik


def filter_batch_numba(seqs, initial, trans, emis):
    return _filter_batch_nb(
        np.ascontiguousarray(seqs, dtype=np.int64),
        np.ascontiguousarray(initial),
        np.ascontiguousarray(trans),
        np.ascontiguousarray(emis),
    )


# ---------------------------------------------------------------------------
# Baum-Welch E-step over a batch of equal-length sequences: expected counts
# for the initial distribution, transitions and emissions, plus total loglik.


def em_accumulate_numpy(seqs, initial, trans, emis):
    N, T = seqs.shape
    H = initial.shape[0]
    V = emis.shape[1]
    alphas = np.empty((T, N, H))
    cs = np.empty((T, N))
    alpha = initial[None, :] * emis[:, seqs[:, 0]].T
    for t in range(T):
        if t > 0:
            alpha = (alpha @ trans) * emis[:, seqs[:, t]].T
        mass = alpha.sum(axis=1)
        cs[t] = mass
        alpha = alpha / mass[:, None]
        alphas[t] = alpha
    loglik = float(np.log(cs).sum())

    init_acc = np.zeros(H)
    trans_acc = np.zeros((H, H))
    emis_acc = np.zeros((V, H))
    beta = np.ones((N, H))
    for t in range(T - 1, -1, -1):
        gamma = alphas[t] * beta
        gamma = gamma / gamma.sum(axis=1)[:, None]
        np.add.at(emis_acc, seqs[:, t], gamma)
        if t == 0:
            init_acc += gamma.sum(axis=0)
        else:
            wb = emis[:, seqs[:, t]].T * beta / cs[t][:, None]
            trans_acc += np.einsum("nh,ng->hg", alphas[t - 1], wb) * trans
            beta = wb @ trans.T
    return init_acc, trans_acc, emis_acc.T.copy(), loglik


@njit(cache=True)
def _em_accumulate_nb(seqs, initial, trans, emis):
    N, T = seqs.shape
    H = initial.shape[0]
    V = emis.shape[1]
    init_acc = np.zeros(H)
    trans_acc = np.zeros((H, H))
    emis_acc = np.zeros((H, V))
    loglik = 0.0
    alphas = np.zeros((T, H))
    cs = np.zeros(T)
    beta = np.zeros(H)
    nxt = np.zeros(H)
    for n in range(N):
        for z in range(H):
            alphas[0, z] = initial[z] * emis[z, seqs[n, 0]]
        for t in range(T):
            if t > 0:
                x = seqs[n, t]
                for z2 in range(H):
                    acc = 0.0
                    for z in range(H):
                        acc += alphas[t - 1, z] * trans[z, z2]
                    alphas[t, z2] = acc * emis[z2, x]
            mass = 0.0
            for z in range(H):
                mass += alphas[t, z]
            cs[t] = mass
            for z in range(H):
                alphas[t, z] /= mass
            loglik += np.log(mass)
        for z in range(H):
            beta[z] = 1.0
        for t in range(T - 1, -1, -1):
            x = seqs[n, t]
            gsum = 0.0
            for z in range(H):
                nxt[z] = alphas[t, z] * beta[z]
                gsum += nxt[z]
            for z in range(H):
                g = nxt[z] / gsum
                emis_acc[z, x] += g
                if t == 0:
                    init_acc[z] += g
            if t > 0:
                c = cs[t]
                for z in range(H):
                    wbz = emis[z, x] * beta[z] / c
                    for zp in range(H):
                        trans_acc[zp, z] += alphas[t - 1, zp] * trans[zp, z] * wbz
                for zp in range(H):
                    acc = 0.0
                    for z in range(H):
                        acc += trans[zp, z] * emis[z, x] * beta[z]
                    nxt[zp] = acc / c
                for z in range(H):
                    beta[z] = nxt[z]
    return init_acc, trans_acc, emis_acc, loglik


def em_accumulate_numba(seqs, initial, trans, emis):
    return _em_accumulate_nb(
        np.ascontiguousarray(seqs, dtype=np.int64),
        np.ascontiguousarray(initial),
        np.ascontiguousarray(trans),
        np.ascontiguousarray(emis),
    )


# ---------------------------------------------------------------------------
# Conditional E-step: expected transition/emission counts for continuations
# scored under per-record priors over the hidden state at the split. The
# first continuation token goes through a transition from the prior state,
# so the boundary transition is counted too. The initial distribution is
# not touched (it belongs to the joint model, not the conditional).


def cond_em_accumulate_numpy(toks, priors, trans, emis):
    N, L = toks.shape
    H = trans.shape[0]
    V = emis.shape[1]
    alphas = np.empty((L + 1, N, H))
    cs = np.empty((L + 1, N))
    alphas[0] = priors
    cs[0] = 1.0
    for i in range(1, L + 1):
        raw = (alphas[i - 1] @ trans) * emis[:, toks[:, i - 1]].T
        mass = raw.sum(axis=1)
        cs[i] = mass
        alphas[i] = raw / mass[:, None]
    loglik = float(np.log(cs[1:]).sum())

    trans_acc = np.zeros((H, H))
    emis_acc = np.zeros((V, H))
    beta = np.ones((N, H))
    for i in range(L, 0, -1):
        gamma = alphas[i] * beta
        gamma = gamma / gamma.sum(axis=1)[:, None]
        np.add.at(emis_acc, toks[:, i - 1], gamma)
        wb = emis[:, toks[:, i - 1]].T * beta / cs[i][:, None]
        trans_acc += np.einsum("nh,ng->hg", alphas[i - 1], wb) * trans
        beta = wb @ trans.T
    return trans_acc, emis_acc.T.copy(), loglik


@njit(cache=True)
def _cond_em_accumulate_nb(toks, priors, trans, emis):
    N, L = toks.shape
    H = trans.shape[0]
    V = emis.shape[1]
    trans_acc = np.zeros((H, H))
    emis_acc = np.zeros((H, V))
    loglik = 0.0
    alphas = np.zeros((L + 1, H))
    cs = np.zeros(L + 1)
    beta = np.zeros(H)
    tmp = np.zeros(H)
    for n in range(N):
        for z in range(H):
            alphas[0, z] = priors[n, z]
        cs[0] = 1.0
        for i in range(1, L + 1):
            x = toks[n, i - 1]
            mass = 0.0
            for z2 in range(H):
                acc = 0.0
                for z in range(H):
                    acc += alphas[i - 1, z] * trans[z, z2]
                alphas[i, z2] = acc * emis[z2, x]
                mass += alphas[i, z2]
            cs[i] = mass
            for z in range(H):
                alphas[i, z] /= mass
            loglik += np.log(mass)
        for z in range(H):
            beta[z] = 1.0
        for i in range(L, 0, -1):
            x = toks[n, i - 1]
            gsum = 0.0
            for z in range(H):
                tmp[z] = alphas[i, z] * beta[z]
                gsum += tmp[z]
            for z in range(H):
                emis_acc[z, x] += tmp[z] / gsum
            c = cs[i]
            for z in range(H):
                wbz = emis[z, x] * beta[z] / c
                for zp in range(H):
                    trans_acc[zp, z] += alphas[i - 1, zp] * trans[zp, z] * wbz
            for zp in range(H):
                acc = 0.0
                for z in range(H):
                    acc += trans[zp, z] * emis[z, x] * beta[z]
                tmp[zp] = acc / c
            for z in range(H):
                beta[z] = tmp[z]
    return trans_acc, emis_acc, loglik


def cond_em_accumulate_numba(toks, priors, trans, emis):
    return _cond_em_accumulate_nb(
        np.ascontiguousarray(toks, dtype=np.int64),
        np.ascontiguousarray(priors),
        np.ascontiguousarray(trans),
        np.ascontiguousarray(emis),
    )


# ---------------------------------------------------------------------------
# Batched backward likelihood: beta[n, z] * exp(logscale[n]) equals
# p(tokens_n | z at the step before the first continuation token).


def backward_batch_numpy(toks, trans, emis):
    N, L = toks.shape
    H = trans.shape[0]
    u = np.ones((N, H))
    logscale = np.zeros(N)
    for i in range(L - 1, -1, -1):
        u = (emis[:, toks[:, i]].T * u) @ trans.T
        mass = u.sum(axis=1)
        ok = mass > 0.0
        with np.errstate(divide="ignore"):
            logscale += np.where(ok, np.log(np.maximum(mass, 1e-300)), -np.inf)
        u = np.where(ok[:, None], u / np.maximum(mass, 1e-300)[:, None], 0.0)
    return u, logscale


@njit(cache=True)
def _backward_batch_nb(toks, trans, emis):
    N, L = toks.shape
    H = trans.shape[0]
    out = np.zeros((N, H))
    logscale = np.zeros(N)
    u = np.zeros(H)
    w = np.zeros(H)
    for n in range(N):
        for z in range(H):
            u[z] = 1.0
        ls = 0.0
        for i in range(L - 1, -1, -1):
            x = toks[n, i]
            for z in range(H):
                w[z] = emis[z, x] * u[z]
            mass = 0.0
            for z in range(H):
                acc = 0.0
                for z2 in range(H):
                    acc += trans[z, z2] * w[z2]
                u[z] = acc
                mass += acc
            if mass > 0.0:
                ls += np.log(mass)
                for z in range(H):
                    u[z] /= mass
            else:
                ls = -np.inf
                for z in range(H):
                    u[z] = 0.0
        for z in range(H):
            out[n, z] = u[z]
        logscale[n] = ls
    return out, logscale


def backward_batch_numba(toks, trans, emis):
    return _backward_batch_nb(
        np.ascontiguousarray(toks, dtype=np.int64),
        np.ascontiguousarray(trans),
        np.ascontiguousarray(emis),
    )


# ---------------------------------------------------------------------------
# Monarch products. The operator is scale * L @ P @ R where L and R are
# block-diagonal (k blocks each) and P permutes the inner dimension:
# (P v)[i] = v[perm[i]]. matvec computes M @ x, vecmat computes x @ M.


def monarch_matvec_numpy(left, perm, right, scale, x):
    k, b, c = right.shape
    inner = np.einsum("kbc,kc->kb", right, x.reshape(k, c)).ravel()
    inner = inner[perm]
    out = np.einsum("kij,kj->ki", left, inner.reshape(k, b)).ravel()
    return out * scale


@njit(cache=True)
def _monarch_matvec_nb(left, perm, right, scale, x):
    k, b, c = right.shape
    d = k * b
    inner = np.zeros(d)
    for blk in range(k):
        for i in range(b):
            acc = 0.0
            for j in range(c):
                acc += right[blk, i, j] * x[blk * c + j]
            inner[blk * b + i] = acc
    shuffled = np.zeros(d)
    for i in range(d):
        shuffled[i] = inner[perm[i]]
    out = np.zeros(d)
    for blk in range(k):
        for i in range(b):
            acc = 0.0
            for j in range(b):
                acc += left[blk, i, j] * shuffled[blk * b + j]
            out[blk * b + i] = acc * scale[blk * b + i]
    return out


def monarch_matvec_numba(left, perm, right, scale, x):
    return _monarch_matvec_nb(
        np.ascontiguousarray(left),
        np.ascontiguousarray(perm, dtype=np.int64),
        np.ascontiguousarray(right),
        np.ascontiguousarray(scale),
        np.ascontiguousarray(x),
    )


def monarch_vecmat_numpy(left, invperm, right, scale, x):
    k, b, _ = left.shape
    v = (x * scale).reshape(k, b)
    tmp = np.einsum("kij,ki->kj", left, v).ravel()
    tmp = tmp[invperm]
    return np.einsum("kbc,kb->kc", right, tmp.reshape(k, b)).ravel()


@njit(cache=True)
def _monarch_vecmat_nb(left, invperm, right, scale, x):
    k, b, _ = left.shape
    c = right.shape[2]
    d = k * b
    tmp = np.zeros(d)
    for blk in range(k):
        for j in range(b):
            acc = 0.0
            for i in range(b):
                acc += left[blk, i, j] * x[blk * b + i] * scale[blk * b + i]
            tmp[blk * b + j] = acc
    unshuf = np.zeros(d)
    for i in range(d):
        unshuf[i] = tmp[invperm[i]]
    out = np.zeros(k * c)
    for blk in range(k):
        for j in range(c):
            acc = 0.0
            for i in range(b):
                acc += right[blk, i, j] * unshuf[blk * b + i]
            out[blk * c + j] = acc
    return out


def monarch_vecmat_numba(left, invperm, right, scale, x):
    return _monarch_vecmat_nb(
        np.ascontiguousarray(left),
        np.ascontiguousarray(invperm, dtype=np.int64),
        np.ascontiguousarray(right),
        np.ascontiguousarray(scale),
        np.ascontiguousarray(x),
    )


def monarch_matmat_numpy(left, perm, right, scale, X):
    """M @ X for a column-stacked X of shape (C, m)."""
    k, b, c = right.shape
    m = X.shape[1]
    inner = np.einsum("kbc,kcm->kbm", right, X.reshape(k, c, m)).reshape(k * b, m)
    inner = inner[perm, :]
    out = np.einsum("kij,kjm->kim", left, inner.reshape(k, b, m)).reshape(k * b, m)
    return out * scale[:, None]


# ---------------------------------------------------------------------------
# Dispatch table. Every kernel keeps both implementations importable; the
# module-level names below are what the rest of the package calls.

IMPLEMENTATIONS = {
    "dfa_table_sweep": {
        "numpy": dfa_table_sweep_numpy,
        "numba": dfa_table_sweep_numba if HAS_NUMBA else None,
    },
    "filter_batch": {
        "numpy": filter_batch_numpy,
        "numba": filter_batch_numba if HAS_NUMBA else None,
    },
    "em_accumulate": {
        "numpy": em_accumulate_numpy,
        "numba": em_accumulate_numba if HAS_NUMBA else None,
    },
    "cond_em_accumulate": {
        "numpy": cond_em_accumulate_numpy,
        "numba": cond_em_accumulate_numba if HAS_NUMBA else None,
    },
    "backward_batch": {
        "numpy": backward_batch_numpy,
        "numba": backward_batch_numba if HAS_NUMBA else None,
    },
    "monarch_matvec": {
        "numpy": monarch_matvec_numpy,
        "numba": monarch_matvec_numba if HAS_NUMBA else None,
    },
    "monarch_vecmat": {
        "numpy": monarch_vecmat_numpy,
        "numba": monarch_vecmat_numba if HAS_NUMBA else None,
    },
}


def _pick(name):
    impls = IMPLEMENTATIONS[name]
    if _USE_NUMBA and impls["numba"] is not None:
        return impls["numba"]
    return impls["numpy"]


dfa_table_sweep = _pick("dfa_table_sweep")
filter_batch = _pick("filter_batch")
em_accumulate = _pick("em_accumulate")
cond_em_accumulate = _pick("cond_em_accumulate")
backward_batch = _pick("backward_batch")
monarch_matvec = _pick("monarch_matvec")
monarch_vecmat = _pick("monarch_vecmat")
monarch_matmat = monarch_matmat_numpy
