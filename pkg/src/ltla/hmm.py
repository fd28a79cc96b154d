"""Exact HMM primitives: filtering, likelihood, sampling.

All recursions run in normalized-probability space with a separately
accumulated log normalizer. Transition and emission operators are either
dense row-stochastic matrices or Monarch-factored operators; every routine
here goes through the small dispatch helpers so both kinds behave
identically.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import monarch
from .errors import ImpossibleObservation
from .monarch import MonarchMatrix
from .seeds import as_generator

STOCHASTIC_TOL = 1e-9

Operator = "np.ndarray | MonarchMatrix"


@dataclass(frozen=True)
class Vocabulary:
    size: int
    token_names: tuple[str, ...] = ()
    eos_id: int | None = None

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("vocabulary size must be positive")
        names = self.token_names or tuple(str(i) for i in range(self.size))
        object.__setattr__(self, "token_names", tuple(names))
        if len(self.token_names) != self.size:
            raise ValueError("token_names length must equal size")
        if len(set(self.token_names)) != self.size:
            raise ValueError("token names must be unique")
        if self.eos_id is not None and not (0 <= self.eos_id < self.size):
            raise ValueError(f"eos_id {self.eos_id} out of range for size {self.size}")

    def tokenize(self, text: str) -> list[int]:
        """Whitespace-split and map each piece by name, falling back to ids."""
        index = {name: i for i, name in enumerate(self.token_names)}
        out = []
        for piece in text.split():
            if piece in index:
                out.append(index[piece])
            elif piece.isdigit() and int(piece) < self.size:
                out.append(int(piece))
            else:
                raise ValueError(f"unknown token {piece!r}")
        return out


# -- operator dispatch -------------------------------------------------------


def op_shape(op) -> tuple[int, int]:
    return op.shape


def propagate(probs: np.ndarray, op) -> np.ndarray:
    """Row vector times operator: distribution over destination states."""
    if isinstance(op, MonarchMatrix):
        return op.vecmat(probs)
    return probs @ op


def apply_backward(op, v: np.ndarray) -> np.ndarray:
    """Operator times column vector (backward recurrences)."""
    if isinstance(op, MonarchMatrix):
        return op.matvec(v)
    return op @ v


def op_column(op, j: int) -> np.ndarray:
    if isinstance(op, MonarchMatrix):
        return op.column(j)
    return op[:, j]


def op_row(op, i: int) -> np.ndarray:
    if isinstance(op, MonarchMatrix):
        return op.row(i)
    return op[i, :]


def op_dense(op) -> np.ndarray:
    if isinstance(op, MonarchMatrix):
        return monarch.materialize(op)
    return op


def op_row_sums(op) -> np.ndarray:
    if isinstance(op, MonarchMatrix):
        return op.matvec(np.ones(op.cols))
    return op.sum(axis=1)


def _check_stochastic(op, rows: int, cols: int, what: str):
    r, c = op_shape(op)
    if (r, c) != (rows, cols):
        raise ValueError(f"{what} must have shape {(rows, cols)}, got {(r, c)}")
    if isinstance(op, MonarchMatrix):
        entry_min = min(op.left_blocks.min(), op.right_blocks.min())
        scale_ok = op.row_scale is None or np.all(op.row_scale >= 0)
        if entry_min < 0 or not scale_ok:
            raise ValueError(f"{what} has negative entries")
    elif np.any(np.asarray(op) < 0):
        raise ValueError(f"{what} has negative entries")
    sums = op_row_sums(op)
    if np.max(np.abs(sums - 1.0)) > STOCHASTIC_TOL:
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(
            f"{what} rows must sum to 1 within {STOCHASTIC_TOL} (worst deviation {worst:.3e}); "
            "refusing to renormalize"
        )


@dataclass
class HmmParams:
    """Initial distribution, transition and emission of the tractable decoder."""

    hidden_size: int
    vocab: Vocabulary
    initial: np.ndarray
    transition: "np.ndarray | MonarchMatrix"
    emission: "np.ndarray | MonarchMatrix"
    max_len: int
    _dense_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if not isinstance(self.transition, MonarchMatrix):
            self.transition = np.asarray(self.transition, dtype=np.float64)
        if not isinstance(self.emission, MonarchMatrix):
            self.emission = np.asarray(self.emission, dtype=np.float64)
        self.validate()

    def validate(self):
        H, V = self.hidden_size, self.vocab.size
        if H <= 0 or self.max_len <= 0:
            raise ValueError("hidden_size and max_len must be positive")
        if self.initial.shape != (H,):
            raise ValueError(f"initial must have length {H}")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("initial distribution must be nonnegative and sum to 1")
        _check_stochastic(self.transition, H, H, "transition")
        _check_stochastic(self.emission, H, V, "emission")

    def transition_dense(self) -> np.ndarray:
        if "trans" not in self._dense_cache:
            self._dense_cache["trans"] = np.ascontiguousarray(op_dense(self.transition))
        return self._dense_cache["trans"]

    def emission_dense(self) -> np.ndarray:
        if "emis" not in self._dense_cache:
            self._dense_cache["emis"] = np.ascontiguousarray(op_dense(self.emission))
        return self._dense_cache["emis"]

    @property
    def is_dense(self) -> bool:
        return not (
            isinstance(self.transition, MonarchMatrix) or isinstance(self.emission, MonarchMatrix)
        )


@dataclass
class Belief:
    """Filtered posterior over the hidden state plus its log normalizer.

    exp(log_norm) is the joint probability mass of everything conditioned
    on so far.
    """

    probs: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)

    def validate(self, tol: float = 1e-9):
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > tol:
            raise ValueError("belief must be a probability vector")


def _check_token(token: int, params: HmmParams):
    if not 0 <= token < params.vocab.size:
        raise ValueError(f"token {token} out of range for vocabulary of size {params.vocab.size}")


def forward_step(belief: Belief, token: int, params: HmmParams) -> Belief:
    """One filtering update: propagate through the transition, condition on token."""
    _check_token(token, params)
    u = propagate(belief.probs, params.transition)
    w = u * op_column(params.emission, token)
    mass = float(w.sum())
    if mass <= 0.0:
        raise ImpossibleObservation(token)
    return Belief(w / mass, belief.log_norm + float(np.log(mass)))


def _seed_step(token: int, params: HmmParams) -> Belief:
    """First filtering step: the initial distribution plays the transition's role."""
    _check_token(token, params)
    w = params.initial * op_column(params.emission, token)
    mass = float(w.sum())
    if mass <= 0.0:
        raise ImpossibleObservation(token, position=0)
    return Belief(w / mass, float(np.log(mass)))


def filter_prefix(seq, params: HmmParams) -> Belief:
    """Posterior over the hidden state after the whole prefix; log_norm is
    the prefix log likelihood."""
    if len(seq) == 0:
        raise ValueError("filter_prefix requires a nonempty sequence")
    if len(seq) > params.max_len:
        raise ValueError(f"sequence length {len(seq)} exceeds max_len {params.max_len}")
    belief = _seed_step(seq[0], params)
    for pos, token in enumerate(seq[1:], start=1):
        try:
            belief = forward_step(belief, token, params)
        except ImpossibleObservation as e:
            raise ImpossibleObservation(e.token, position=pos) from None
    return belief


def joint_loglik(seq, params: HmmParams) -> float:
    """log q(x_1..x_n); -inf for impossible sequences."""
    try:
        return filter_prefix(seq, params).log_norm
    except ImpossibleObservation:
        return -np.inf


def continuation_loglik(prior: Belief, continuation, params: HmmParams) -> float:
    """log sum_z prior[z] * q(continuation | z), by forward steps seeded at prior."""
    if len(continuation) == 0:
        raise ValueError("continuation must be nonempty")
    belief = Belief(prior.probs, 0.0)
    for token in continuation:
        belief = forward_step(belief, token, params)
    return belief.log_norm


def backward_likelihood(continuation, params: HmmParams) -> tuple[np.ndarray, float]:
    """(beta, logscale) with beta[z]*exp(logscale) = q(continuation | z_t = z).

    Single backward pass; the scaled form keeps long continuations stable.
    """
    H = params.hidden_size
    u = np.ones(H)
    logscale = 0.0
    for token in reversed(list(continuation)):
        _check_token(token, params)
        u = apply_backward(params.transition, op_column(params.emission, token) * u)
        mass = float(u.sum())
        if mass <= 0.0:
            return np.zeros(H), -np.inf
        u = u / mass
        logscale += float(np.log(mass))
    return u, logscale


def predictive_dist(belief: Belief | None, params: HmmParams) -> np.ndarray:
    """Next-token distribution given the current belief (None = fresh chain)."""
    u = params.initial if belief is None else propagate(belief.probs, params.transition)
    if isinstance(params.emission, MonarchMatrix):
        return params.emission.vecmat(u)
    return u @ params.emission


def sample_sequence(params: HmmParams, length: int, rng) -> list[int]:
    """Ancestral sample z1 -> x1 -> z2 -> ...; deterministic given the seed."""
    if length > params.max_len:
        raise ValueError(f"length {length} exceeds max_len {params.max_len}")
    gen = as_generator(rng)
    tokens = []
    z = int(gen.choice(params.hidden_size, p=params.initial))
    for _ in range(length):
        row = op_row(params.emission, z)
        tokens.append(int(gen.choice(params.vocab.size, p=row / row.sum())))
        z = int(gen.choice(params.hidden_size, p=_normalized_row(params.transition, z)))
    return tokens


def _normalized_row(op, i: int) -> np.ndarray:
    row = op_row(op, i)
    return row / row.sum()


# -- serialization -----------------------------------------------------------


def _operator_to_json(op) -> dict:
    if isinstance(op, MonarchMatrix):
        return monarch.to_json_dict(op)
    return {"kind": "dense", "matrix": np.asarray(op).tolist()}


def _operator_from_json(d: dict):
    kind = d.get("kind")
    if kind == "dense":
        return np.asarray(d["matrix"], dtype=np.float64)
    if kind == "monarch":
        return monarch.from_json_dict(d)
    raise ValueError(f"unknown operator kind {kind!r}")


def to_json_dict(params: HmmParams) -> dict:
    return {
        "hidden_size": params.hidden_size,
        "vocab": {
            "size": params.vocab.size,
            "token_names": list(params.vocab.token_names),
            "eos_id": params.vocab.eos_id,
        },
        "initial": params.initial.tolist(),
        "transition": _operator_to_json(params.transition),
        "emission": _operator_to_json(params.emission),
        "max_len": params.max_len,
    }


def from_json_dict(d: dict) -> HmmParams:
    voc = d["vocab"]
    vocab = Vocabulary(
        size=voc["size"],
        token_names=tuple(voc.get("token_names") or ()),
        eos_id=voc.get("eos_id"),
    )
    return HmmParams(
        hidden_size=d["hidden_size"],
        vocab=vocab,
        initial=np.asarray(d["initial"], dtype=np.float64),
        transition=_operator_from_json(d["transition"]),
        emission=_operator_from_json(d["emission"]),
        max_len=d["max_len"],
    )


def save(params: HmmParams, path):
    with open(path, "w") as f:
        json.dump(to_json_dict(params), f)


def load(path) -> HmmParams:
    with open(path) as f:
        return from_json_dict(json.load(f))
