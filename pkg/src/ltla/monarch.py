"""Monarch-factored operators: scale * L @ P @ R with block-diagonal L, R.

The factorization keeps per-step cost sub-quadratic in the operand size:
a matvec touches b*(rows + inner) + inner entries instead of rows*cols.
Row-stochastic instances are produced by `row_normalize`, which derives
strictly positive block entries from unconstrained parameters and stores
the exact per-row normalizer as a scale vector, so the structured form is
preserved.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import SizeGuardExceeded

MATERIALIZE_CAP = 1 << 22
PARAM_CLAMP = 30.0


def perfect_shuffle(d: int, b: int) -> np.ndarray:
    """Permutation given by transposing the b x (d/b) reshape of 0..d-1."""
    if d % b != 0:
        raise ValueError(f"block size {b} does not divide inner dimension {d}")
    return np.arange(d).reshape(b, d // b).T.ravel().copy()


@dataclass
class MonarchMatrix:
    """Two block-diagonal factors around a fixed inner permutation.

    left_blocks: (k, b, b), right_blocks: (k, b, cols//k). The inner
    dimension equals rows (= k*b). `params`, when present, are the
    unconstrained values whose exponentials produced the block entries;
    training updates go through them. `row_scale` is the per-row
    normalizer set by `row_normalize` (None for raw operators).
    """

    rows: int
    cols: int
    block_size: int
    left_blocks: np.ndarray
    right_blocks: np.ndarray
    perm: np.ndarray
    row_scale: np.ndarray | None = None
    params: tuple[np.ndarray, np.ndarray] | None = None
    clamp_warning: bool = False
    _invperm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k = self.rows // self.block_size
        b = self.block_size
        if k * b != self.rows:
            raise ValueError(f"block size {b} does not divide rows {self.rows}")
        if self.cols % k != 0:
            raise ValueError(f"block count {k} does not divide cols {self.cols}")
        c = self.cols // k
        if self.left_blocks.shape != (k, b, b):
            raise ValueError(f"left blocks must be {(k, b, b)}, got {self.left_blocks.shape}")
        if self.right_blocks.shape != (k, b, c):
            raise ValueError(f"right blocks must be {(k, b, c)}, got {self.right_blocks.shape}")
        if self.perm.shape != (self.rows,):
            raise ValueError("perm must cover the inner dimension")
        self._invperm = np.argsort(self.perm)

    @property
    def num_blocks(self) -> int:
        return self.rows // self.block_size

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def _scale(self) -> np.ndarray:
        if self.row_scale is None:
            return np.ones(self.rows)
        return self.row_scale

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """M @ x for x of length cols."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cols,):
            raise ValueError(f"expected vector of length {self.cols}, got {x.shape}")
        return kernels.monarch_matvec(
            self.left_blocks, self.perm, self.right_blocks, self._scale(), x
        )

    def vecmat(self, x: np.ndarray) -> np.ndarray:
        """x @ M for x of length rows."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.rows,):
            raise ValueError(f"expected vector of length {self.rows}, got {x.shape}")
        return kernels.monarch_vecmat(
            self.left_blocks, self._invperm, self.right_blocks, self._scale(), x
        )

    def matmat(self, X: np.ndarray) -> np.ndarray:
        """M @ X for column-stacked X of shape (cols, m)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != self.cols:
            raise ValueError(f"expected (cols, m) array, got {X.shape}")
        return kernels.monarch_matmat(
            self.left_blocks, self.perm, self.right_blocks, self._scale(), X
        )

    def row(self, i: int) -> np.ndarray:
        e = np.zeros(self.rows)
        e[i] = 1.0
        return self.vecmat(e)

    def column(self, j: int) -> np.ndarray:
        e = np.zeros(self.cols)
        e[j] = 1.0
        return self.matvec(e)


def from_blocks(
    left_blocks: np.ndarray,
    right_blocks: np.ndarray,
    perm: np.ndarray | None = None,
    row_scale: np.ndarray | None = None,
) -> MonarchMatrix:
    """Build directly from block entries (perm defaults to the perfect shuffle)."""
    left_blocks = np.asarray(left_blocks, dtype=np.float64)
    right_blocks = np.asarray(right_blocks, dtype=np.float64)
    k, b, _ = left_blocks.shape
    c = right_blocks.shape[2]
    rows = k * b
    cols = k * c
    if perm is None:
        perm = perfect_shuffle(rows, b)
    return MonarchMatrix(
        rows=rows,
        cols=cols,
        block_size=b,
        left_blocks=left_blocks,
        right_blocks=right_blocks,
        perm=np.asarray(perm, dtype=np.int64),
        row_scale=None if row_scale is None else np.asarray(row_scale, dtype=np.float64),
    )


def from_params(
    left_params: np.ndarray, right_params: np.ndarray, perm: np.ndarray | None = None
) -> MonarchMatrix:
    """Unnormalized operator whose entries are exp(clamped params)."""
    left_params = np.asarray(left_params, dtype=np.float64)
    right_params = np.asarray(right_params, dtype=np.float64)
    clamped = bool(
        np.any(np.abs(left_params) > PARAM_CLAMP) or np.any(np.abs(right_params) > PARAM_CLAMP)
    )
    m = from_blocks(
        np.exp(np.clip(left_params, -PARAM_CLAMP, PARAM_CLAMP)),
        np.exp(np.clip(right_params, -PARAM_CLAMP, PARAM_CLAMP)),
        perm=perm,
    )
    return replace(m, params=(left_params, right_params), clamp_warning=clamped)


def random_monarch(
    rows: int, cols: int, block_size: int, rng: np.random.Generator, spread: float = 1.0
) -> MonarchMatrix:
    """Row-normalized operator with Gaussian parameters (for init and tests)."""
    k = rows // block_size
    if k * block_size != rows or cols % k != 0:
        raise ValueError(f"shape ({rows},{cols}) incompatible with block size {block_size}")
    lp = rng.normal(0.0, spread, size=(k, block_size, block_size))
    rp = rng.normal(0.0, spread, size=(k, block_size, cols // k))
    return row_normalize(from_params(lp, rp))


def row_normalize(m: MonarchMatrix) -> MonarchMatrix:
    """Positive entries from exp(params), rows scaled to sum to one.

    The scale vector is the reciprocal of matvec against all-ones, so
    normalization never materializes the composite. Idempotent: the
    params are untouched and the scale is recomputed exactly.
    """
    if m.params is not None:
        left_params, right_params = m.params
    else:
        if np.any(m.left_blocks <= 0.0) or np.any(m.right_blocks <= 0.0):
            raise ValueError("row_normalize without params requires strictly positive entries")
        left_params = np.log(m.left_blocks)
        right_params = np.log(m.right_blocks)
    if not (np.all(np.isfinite(left_params)) and np.all(np.isfinite(right_params))):
        raise ValueError("parameters must be finite")
    base = from_params(left_params, right_params, perm=m.perm)
    sums = base.matvec(np.ones(base.cols))
    return replace(base, row_scale=1.0 / sums)


def with_params(
    m: MonarchMatrix, left_params: np.ndarray, right_params: np.ndarray
) -> MonarchMatrix:
    """Fresh normalized operator from updated parameters (same perm)."""
    return row_normalize(from_params(left_params, right_params, perm=m.perm))


def materialize(m: MonarchMatrix) -> np.ndarray:
    """Dense scale * L @ P @ R; guarded against accidental huge outputs."""
    if m.rows * m.cols > MATERIALIZE_CAP:
        raise SizeGuardExceeded(m.rows * m.cols, MATERIALIZE_CAP, "monarch materialization")
    k = m.num_blocks
    b = m.block_size
    c = m.cols // k
    rdense = np.zeros((m.rows, m.cols))
    for blk in range(k):
        rdense[blk * b : (blk + 1) * b, blk * c : (blk + 1) * c] = m.right_blocks[blk]
    pr = rdense[m.perm, :]
    out = np.zeros((m.rows, m.cols))
    for blk in range(k):
        out[blk * b : (blk + 1) * b, :] = m.left_blocks[blk] @ pr[blk * b : (blk + 1) * b, :]
    if m.row_scale is not None:
        out *= m.row_scale[:, None]
    return out


def check_row_stochastic(m: MonarchMatrix, tol: float = 1e-9) -> bool:
    """Detects stale scale vectors: every row must sum to one."""
    sums = m.matvec(np.ones(m.cols))
    return bool(np.all(np.abs(sums - 1.0) <= tol))


def count_objective(m: MonarchMatrix, counts: np.ndarray) -> float:
    """sum_ij counts[ij] * log M[ij] for the row-normalized operator."""
    dense = materialize(row_normalize(m) if m.row_scale is None else m)
    with np.errstate(divide="ignore"):
        logm = np.log(dense)
    return float(np.where(counts > 0, counts * logm, 0.0).sum())


def _count_gradient(left_params, right_params, perm, counts):
    """Gradient of the normalized-count objective w.r.t. the unconstrained
    parameters. Works on the unnormalized composite: the per-row normalizer
    contributes the -rowsum term."""
    lb = np.exp(np.clip(left_params, -PARAM_CLAMP, PARAM_CLAMP))
    rb = np.exp(np.clip(right_params, -PARAM_CLAMP, PARAM_CLAMP))
    k, b, _ = lb.shape
    c = rb.shape[2]
    rows, cols = k * b, k * c
    rdense = np.zeros((rows, cols))
    for blk in range(k):
        rdense[blk * b : (blk + 1) * b, blk * c : (blk + 1) * c] = rb[blk]
    pr = rdense[perm, :]
    m0 = np.zeros((rows, cols))
    for blk in range(k):
        m0[blk * b : (blk + 1) * b, :] = lb[blk] @ pr[blk * b : (blk + 1) * b, :]
    rowsum = m0.sum(axis=1)
    # cells outside the permutation-reachable support are structurally zero;
    # counts there cannot be modeled and contribute no gradient
    g = np.where(m0 > 0, counts / np.maximum(m0, 1e-300), 0.0)
    g -= (counts.sum(axis=1) / rowsum)[:, None]
    with np.errstate(divide="ignore"):
        logm = np.where(m0 > 0, np.log(np.maximum(m0, 1e-300)), -np.inf)
    terms = logm - np.log(rowsum)[:, None]
    obj = float((counts[counts > 0] * terms[counts > 0]).sum())
    invperm = np.argsort(perm)
    dl = np.empty_like(lb)
    dpr = np.empty((rows, cols))
    for blk in range(k):
        rows_slice = slice(blk * b, (blk + 1) * b)
        dl[blk] = g[rows_slice, :] @ pr[rows_slice, :].T
        dpr[rows_slice, :] = lb[blk].T @ g[rows_slice, :]
    drdense = dpr[invperm, :]
    dr = np.empty_like(rb)
    for blk in range(k):
        dr[blk] = drdense[blk * b : (blk + 1) * b, blk * c : (blk + 1) * c]
    dleft = dl * lb
    dright = dr * rb
    dleft[np.abs(left_params) > PARAM_CLAMP] = 0.0
    dright[np.abs(right_params) > PARAM_CLAMP] = 0.0
    return dleft, dright, obj


def fit_to_counts(
    m: MonarchMatrix, counts: np.ndarray, steps: int = 60, learning_rate: float = 0.2
) -> MonarchMatrix:
    """Gradient ascent of the expected-count log-likelihood over the
    factor parameters; the returned operator never scores the counts worse
    than the input (the best iterate is kept)."""
    if m.params is None:
        m = row_normalize(m)
    lp, rp = (p.copy() for p in m.params)
    best = (lp.copy(), rp.copy())
    best_obj = _count_gradient(lp, rp, m.perm, counts)[2]
    mom_l = np.zeros_like(lp)
    mom_r = np.zeros_like(rp)
    vel_l = np.zeros_like(lp)
    vel_r = np.zeros_like(rp)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        gl, gr, obj = _count_gradient(lp, rp, m.perm, counts)
        if obj > best_obj:
            best_obj = obj
            best = (lp.copy(), rp.copy())
        mom_l = b1 * mom_l + (1 - b1) * gl
        mom_r = b1 * mom_r + (1 - b1) * gr
        vel_l = b2 * vel_l + (1 - b2) * gl * gl
        vel_r = b2 * vel_r + (1 - b2) * gr * gr
        lp = lp + learning_rate * (mom_l / (1 - b1**step)) / (
            np.sqrt(vel_l / (1 - b2**step)) + eps
        )
        rp = rp + learning_rate * (mom_r / (1 - b1**step)) / (
            np.sqrt(vel_r / (1 - b2**step)) + eps
        )
    gl, gr, obj = _count_gradient(lp, rp, m.perm, counts)
    if obj > best_obj:
        best = (lp, rp)
    return with_params(m, *best)


def to_json_dict(m: MonarchMatrix) -> dict:
    canonical = np.array_equal(m.perm, perfect_shuffle(m.rows, m.block_size))
    return {
        "kind": "monarch",
        "b": m.block_size,
        "left_blocks": m.left_blocks.tolist(),
        "perm": "perfect_shuffle" if canonical else m.perm.tolist(),
        "right_blocks": m.right_blocks.tolist(),
        "row_scale": None if m.row_scale is None else m.row_scale.tolist(),
    }


def from_json_dict(d: dict) -> MonarchMatrix:
    if d.get("kind") != "monarch":
        raise ValueError("not a monarch operator document")
    left = np.asarray(d["left_blocks"], dtype=np.float64)
    right = np.asarray(d["right_blocks"], dtype=np.float64)
    k, b, _ = left.shape
    perm = d.get("perm", "perfect_shuffle")
    perm_arr = perfect_shuffle(k * b, b) if perm == "perfect_shuffle" else np.asarray(perm, dtype=np.int64)
    scale = d.get("row_scale")
    return from_blocks(left, right, perm=perm_arr, row_scale=scale)
