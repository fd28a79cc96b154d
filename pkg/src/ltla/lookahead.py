"""Context-independent lookahead tables and the queries they answer.

A table holds, for every remaining-horizon layer t (= tokens consumed so
far), the probability that the constraint ends up satisfied given the
hidden state and the automaton state at t. Building never reads a token
sequence; a query is one contraction of the current belief against the
table layer, so all prefixes share the same table object.

Layer indexing: `table[t][z][s]` conditions on the state z_t that emitted
token t. Empty-context queries (t = 0) go through `initial_event_prob`,
which aggregates with the initial distribution instead of a belief.
"""

import hashlib
import json
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dfa import Dfa, accept_all_dfa, constraint_hash, dfa_step, run
from .hmm import Belief, HmmParams, MonarchMatrix, propagate, to_json_dict

BUILD_COUNTS = Counter()


def reset_build_counts():
    BUILD_COUNTS.clear()


def params_hash(params: HmmParams) -> str:
    blob = json.dumps(to_json_dict(params), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LookaheadTable:
    horizon: int
    table: np.ndarray  # (horizon + 1, H, S)
    constraint_id: str
    log_domain: bool = False  # True for classifier tables (log expected factors)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.shape[0] != self.horizon + 1:
            raise ValueError("table must have horizon + 1 layers")

    @property
    def num_states(self) -> int:
        return self.table.shape[2]


@dataclass(frozen=True)
class FactorizedClassifier:
    """Position-shared log-linear attribute scorer.

    The attribute probability of a full sequence is
    sigmoid(bias + sum_t weights[x_t]); lookahead replaces the unseen
    suffix sum by the log of its expected exponential under the surrogate.
    """

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ValueError("classifier weights must be finite")
        object.__setattr__(self, "weights", w)

    def context_score(self, tokens) -> float:
        return float(sum(self.weights[t] for t in tokens))


def classifier_hash(clf: FactorizedClassifier) -> str:
    blob = json.dumps({"weights": clf.weights.tolist(), "bias": clf.bias}, sort_keys=True)
    return "clf-" + hashlib.sha256(blob.encode()).hexdigest()[:16]


def classifier_to_json(clf: FactorizedClassifier) -> dict:
    return {"weights": clf.weights.tolist(), "bias": clf.bias}


def classifier_from_json(d: dict) -> FactorizedClassifier:
    return FactorizedClassifier(weights=np.asarray(d["weights"], dtype=np.float64), bias=d["bias"])


# -- building ----------------------------------------------------------------


def _sweep_sparse(table_next, trans_apply, emis, d: Dfa):
    """One backward layer against a sparse automaton: default target per
    state plus per-edge corrections, costing O(mH) instead of O(SVH)."""
    H = emis.shape[0]
    S = d.num_states
    inner = table_next[:, d.defaults].copy()
    for s in range(S):
        base = table_next[:, d.defaults[s]]
        for token, target in d.edges[s].items():
            inner[:, s] += emis[:, token] * (table_next[:, target] - base)
    return trans_apply(inner)


def precompute_dfa_table(params: HmmParams, d: Dfa, horizon: int) -> LookaheadTable:
    """Backward recurrence over (hidden state, automaton state) pairs."""
    if horizon > params.max_len:
        raise ValueError(f"horizon {horizon} exceeds max_len {params.max_len}")
    if d.num_tokens != params.vocab.size:
        raise ValueError("automaton alphabet does not match the vocabulary")
    H, S = params.hidden_size, d.num_states
    table = np.empty((horizon + 1, H, S))
    table[horizon] = np.where(d.accept_mask(), 1.0, 0.0)[None, :]

    if isinstance(params.transition, MonarchMatrix):
        trans_apply = params.transition.matmat
    else:
        trans = params.transition

        def trans_apply(inner):
            return trans @ inner

    emis = params.emission_dense()
    dense = d.is_dense
    delta = d.delta if dense else None
    for t in range(horizon - 1, -1, -1):
        if dense and not isinstance(params.transition, MonarchMatrix):
            table[t] = kernels.dfa_table_sweep(table[t + 1], params.transition_dense(), emis, delta)
        elif dense:
            gathered = table[t + 1][:, delta]
            inner = np.einsum("hv,hsv->hs", emis, gathered)
            table[t] = trans_apply(inner)
        else:
            table[t] = _sweep_sparse(table[t + 1], trans_apply, emis, d)
    tbl = LookaheadTable(horizon=horizon, table=table, constraint_id=constraint_hash(d))
    BUILD_COUNTS[tbl.constraint_id] += 1
    return tbl


def precompute_classifier_table(
    params: HmmParams, clf: FactorizedClassifier, horizon: int
) -> LookaheadTable:
    """log E[prod_{t'>t} exp(w[x_t']) | z_t], by the same backward sweep.

    Kept in log space with a per-layer max shift so large weights cannot
    overflow the accumulated factors.
    """
    if horizon > params.max_len:
        raise ValueError(f"horizon {horizon} exceeds max_len {params.max_len}")
    if clf.weights.shape != (params.vocab.size,):
        raise ValueError("classifier weights must cover the vocabulary")
    H = params.hidden_size
    phi = np.exp(clf.weights)
    if isinstance(params.emission, MonarchMatrix):
        c = params.emission.matvec(phi)
    else:
        c = params.emission @ phi
    logc = np.log(c)
    table = np.zeros((horizon + 1, H, 1))
    g = np.zeros(H)
    for t in range(horizon - 1, -1, -1):
        y = g + logc
        shift = float(y.max())
        v = np.exp(y - shift)
        if isinstance(params.transition, MonarchMatrix):
            applied = params.transition.matvec(v)
        else:
            applied = params.transition @ v
        g = np.log(applied) + shift
        table[t, :, 0] = g
    tbl = LookaheadTable(
        horizon=horizon, table=table, constraint_id=classifier_hash(clf), log_domain=True
    )
    BUILD_COUNTS[tbl.constraint_id] += 1
    return tbl


# -- querying ----------------------------------------------------------------


def query_event_prob(belief: Belief, dfa_state: int, tbl: LookaheadTable, t: int) -> float:
    """sum_z belief[z] * p(constraint | z_t = z, s_t): Bayes aggregation."""
    if tbl.log_domain:
        raise ValueError("classifier tables are queried via classifier_attribute_prob")
    if not 1 <= t <= tbl.horizon:
        raise ValueError(f"position {t} outside table horizon 1..{tbl.horizon}")
    return float(belief.probs @ tbl.table[t][:, dfa_state])


def initial_event_prob(params: HmmParams, d: Dfa, tbl: LookaheadTable) -> float:
    """Constraint probability before any token: aggregate with the initial
    distribution and one emission step (there is no belief yet)."""
    if tbl.horizon == 0:
        return 1.0 if d.start in d.accept else 0.0
    weights = params.initial[:, None] * params.emission_dense()
    gathered = tbl.table[1][:, d.step_row(d.start)]
    return float((weights * gathered).sum())


def classifier_log_future_factor(belief: Belief, tbl: LookaheadTable, t: int) -> float:
    """log E[product of future token factors | context]."""
    if not tbl.log_domain:
        raise ValueError("not a classifier table")
    if not 1 <= t <= tbl.horizon:
        raise ValueError(f"position {t} outside table horizon 1..{tbl.horizon}")
    with np.errstate(divide="ignore"):
        y = np.log(belief.probs) + tbl.table[t][:, 0]
    shift = float(y.max())
    if shift == -np.inf:
        return -np.inf
    return float(np.log(np.exp(y - shift).sum()) + shift)


def classifier_initial_log_factor(
    params: HmmParams, clf: FactorizedClassifier, tbl: LookaheadTable
) -> float:
    """log E[product of all token factors], from the fresh chain."""
    if tbl.horizon == 0:
        return 0.0
    phi = np.exp(clf.weights)
    if isinstance(params.emission, MonarchMatrix):
        c = params.emission.matvec(phi)
    else:
        c = params.emission @ phi
    with np.errstate(divide="ignore"):
        y = np.log(params.initial) + np.log(c) + tbl.table[1][:, 0]
    shift = float(y.max())
    return float(np.log(np.exp(y - shift).sum()) + shift)


def classifier_attribute_prob(
    clf: FactorizedClassifier,
    context_tokens,
    belief: Belief | None,
    tbl: LookaheadTable,
    params: HmmParams,
) -> float:
    """sigmoid(bias + realized context score + log expected future factor)."""
    t = len(context_tokens)
    if t == 0:
        future = classifier_initial_log_factor(params, clf, tbl)
    else:
        future = classifier_log_future_factor(belief, tbl, t)
    logit = clf.bias + clf.context_score(context_tokens) + future
    return 1.0 / (1.0 + math.exp(-logit))


def query_positional(belief: Belief | None, params: HmmParams, k: int, v: int) -> float:
    """Probability that the token k steps ahead equals v.

    A None belief means the chain has not started; the first token is then
    k steps ahead of nothing and z_1 follows the initial distribution.
    """
    if k < 1:
        raise ValueError("offset must be >= 1")
    if not 0 <= v < params.vocab.size:
        raise ValueError("token out of range")
    if belief is None:
        u = params.initial.copy()
        steps = k - 1
    else:
        u = belief.probs.copy()
        steps = k
    for _ in range(steps):
        u = propagate(u, params.transition)
    if isinstance(params.emission, MonarchMatrix):
        return float(params.emission.vecmat(u)[v])
    return float(u @ params.emission[:, v])


def eos_within_dfa(k: int, eos_id: int, num_tokens: int) -> Dfa:
    """Accepts iff the end token appears among the first k tokens read.

    States: 0..k-1 count eos-free steps, then an absorbing accept and an
    absorbing dead state.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    acc = k
    dead = k + 1
    delta = np.empty((k + 2, num_tokens), dtype=np.int64)
    for j in range(k):
        delta[j, :] = j + 1 if j + 1 < k else dead
        delta[j, eos_id] = acc
    delta[acc, :] = acc
    delta[dead, :] = dead
    return Dfa(num_states=k + 2, num_tokens=num_tokens, start=0, accept=frozenset({acc}), delta=delta)


# -- query specs and table management ----------------------------------------


@dataclass
class QuerySpec:
    kind: str  # dfa_accept | token_at_offset | eos_within | classifier_attr
    dfa: Dfa | None = None
    offset: int = 0
    token: int = 0
    classifier: FactorizedClassifier | None = None

    def __post_init__(self):
        kinds = {"dfa_accept", "token_at_offset", "eos_within", "classifier_attr"}
        if self.kind not in kinds:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.kind == "dfa_accept" and self.dfa is None:
            raise ValueError("dfa_accept requires a dfa")
        if self.kind in {"token_at_offset", "eos_within"} and self.offset < 1:
            raise ValueError("offset must be >= 1")
        if self.kind == "classifier_attr" and self.classifier is None:
            raise ValueError("classifier_attr requires a classifier")

    def constraint_id(self, params: HmmParams) -> str:
        if self.kind == "dfa_accept":
            return constraint_hash(self.dfa)
        if self.kind == "eos_within":
            d = eos_within_dfa(self.offset, params.vocab.eos_id, params.vocab.size)
            return constraint_hash(d)
        if self.kind == "classifier_attr":
            return classifier_hash(self.classifier)
        return f"pos-{self.offset}-{self.token}"


def build_table(
    params: HmmParams, spec: QuerySpec, horizon: int, cache_dir=None
) -> LookaheadTable | None:
    """Table for the spec (None for positional queries, which are direct)."""
    if spec.kind == "token_at_offset":
        return None
    if spec.kind == "classifier_attr":
        builder = lambda: precompute_classifier_table(params, spec.classifier, horizon)
    elif spec.kind == "eos_within":
        if params.vocab.eos_id is None:
            raise ValueError("eos_within requires a vocabulary with an eos token")
        d = eos_within_dfa(spec.offset, params.vocab.eos_id, params.vocab.size)
        builder = lambda: precompute_dfa_table(params, d, horizon)
    else:
        builder = lambda: precompute_dfa_table(params, spec.dfa, horizon)
    if cache_dir is None:
        return builder()
    key = f"{params_hash(params)}_{spec.constraint_id(params)}_{horizon}.tbl"
    path = os.path.join(cache_dir, key)
    if os.path.exists(path):
        return load_table(path)
    tbl = builder()
    os.makedirs(cache_dir, exist_ok=True)
    save_table(tbl, path)
    return tbl


def query_prob(
    spec: QuerySpec,
    params: HmmParams,
    context,
    horizon: int,
    belief: Belief | None = None,
    table: LookaheadTable | None = None,
) -> float:
    """Answer a query for the given context (belief defaults to filtering)."""
    from .hmm import filter_prefix  # local import to avoid cycle at module load

    t = len(context)
    if spec.kind == "token_at_offset":
        if belief is None and t > 0:
            belief = filter_prefix(context, params)
        return query_positional(belief if t > 0 else None, params, spec.offset, spec.token)
    if table is None:
        table = build_table(params, spec, horizon)
    if spec.kind == "classifier_attr":
        if belief is None and t > 0:
            belief = filter_prefix(context, params)
        return classifier_attribute_prob(spec.classifier, context, belief, table, params)
    d = spec.dfa
    if spec.kind == "eos_within":
        d = eos_within_dfa(spec.offset, params.vocab.eos_id, params.vocab.size)
        # the window opens at the query point; the context does not advance it
        state = d.start
    else:
        state = run(d, context)
    if t == 0:
        return initial_event_prob(params, d, table)
    if belief is None:
        belief = filter_prefix(context, params)
    return query_event_prob(belief, state, table, t)


# -- binary serialization ----------------------------------------------------

_MAGIC = b"LTLATBL1"


def save_table(tbl: LookaheadTable, path):
    cid = tbl.constraint_id.encode()
    T = tbl.horizon
    _, H, S = tbl.table.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BIIIH", int(tbl.log_domain), T, H, S, len(cid)))
        f.write(cid)
        f.write(np.ascontiguousarray(tbl.table, dtype="<f8").tobytes())


def load_table(path) -> LookaheadTable:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a lookahead table file")
        log_domain, T, H, S, idlen = struct.unpack("<BIIIH", f.read(15))
        cid = f.read(idlen).decode()
        payload = np.frombuffer(f.read((T + 1) * H * S * 8), dtype="<f8")
    table = payload.reshape(T + 1, H, S).astype(np.float64)
    return LookaheadTable(horizon=T, table=table, constraint_id=cid, log_domain=bool(log_domain))
