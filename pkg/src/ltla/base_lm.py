"""Autoregressive ground-truth models: next-token rows plus context features.

The tabular family is exact and enumerable, which is what makes brute-force
oracles for distillation possible. Feature vectors expose the first token
and the last k tokens as one-hots, so a planted dependency of the suffix on
the first token is linearly representable by an encoder head.
"""

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import hmm as hmm_mod
from .hmm import Belief, HmmParams, Vocabulary, predictive_dist
from .seeds import as_generator

DIST_TOL = 1e-9


class BaseLm(ABC):
    """Next-token distribution, deterministic state advance, featurization."""

    vocab: Vocabulary
    feature_dim: int

    @abstractmethod
    def initial_state(self):
        ...

    @abstractmethod
    def next_dist(self, state) -> np.ndarray:
        ...

    @abstractmethod
    def advance(self, state, token: int):
        ...

    @abstractmethod
    def featurize(self, state) -> np.ndarray:
        ...

    def state_after(self, tokens):
        state = self.initial_state()
        for t in tokens:
            state = self.advance(state, t)
        return state


def _validate_rows(rows: np.ndarray, what: str):
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > DIST_TOL):
        raise ValueError(f"{what} rows must be stochastic within {DIST_TOL}")


def _ctx_index(ctx: tuple, V: int) -> int:
    idx = 0
    for t in ctx:
        idx = idx * V + t
    return idx


class TabularLm(BaseLm):
    """Order-k conditional tables with an optional planted long-range switch.

    `tables[j]` (shape (V^j, V)) is used while only j < k tokens exist;
    `tables[k]` afterwards. When a switch is present, the full-context
    table is replaced by the entry keyed on the first sampled token, which
    plants a dependency of the whole suffix on that token.
    """

    def __init__(self, vocab: Vocabulary, order: int, tables, long_range_switch=None):
        V = vocab.size
        if order < 0:
            raise ValueError("order must be >= 0")
        if len(tables) != order + 1:
            raise ValueError("need one table per context length 0..order")
        self.vocab = vocab
        self.order = order
        self.tables = []
        for j, tab in enumerate(tables):
            arr = np.asarray(tab, dtype=np.float64).reshape(V**j, V)
            _validate_rows(arr, f"order-{j} table")
            self.tables.append(arr)
        self.long_range_switch = None
        if long_range_switch is not None:
            self.long_range_switch = {}
            for first, tab in long_range_switch.items():
                arr = np.asarray(tab, dtype=np.float64).reshape(V**order, V)
                _validate_rows(arr, f"switch table for first token {first}")
                self.long_range_switch[int(first)] = arr
        self.feature_dim = (order + 1) * V

    def initial_state(self):
        return (-1, ())

    def next_dist(self, state) -> np.ndarray:
        first, lastk = state
        V = self.vocab.size
        j = len(lastk)
        if j < self.order:
            return self.tables[j][_ctx_index(lastk, V)]
        if self.long_range_switch is not None and first in self.long_range_switch:
            return self.long_range_switch[first][_ctx_index(lastk, V)]
        return self.tables[self.order][_ctx_index(lastk, V)]

    def advance(self, state, token: int):
        first, lastk = state
        if not 0 <= token < self.vocab.size:
            raise ValueError(f"token {token} out of range")
        new_first = token if first < 0 else first
        new_last = (lastk + (token,))[-self.order :] if self.order > 0 else ()
        return (new_first, new_last)

    def featurize(self, state) -> np.ndarray:
        first, lastk = state
        V = self.vocab.size
        out = np.zeros(self.feature_dim)
        if first >= 0:
            out[first] = 1.0
        pad = self.order - len(lastk)
        for i, tok in enumerate(lastk):
            out[(1 + pad + i) * V + tok] = 1.0
        return out


class HmmLm(BaseLm):
    """An HMM exposed through the autoregressive interface (surrogate = base
    LM setups and exactness tests). Features are the current belief."""

    def __init__(self, params: HmmParams):
        self.params = params
        self.vocab = params.vocab
        self.feature_dim = params.hidden_size

    def initial_state(self):
        return None

    def next_dist(self, state) -> np.ndarray:
        return predictive_dist(state, self.params)

    def advance(self, state, token: int):
        if state is None:
            return hmm_mod._seed_step(token, self.params)
        return hmm_mod.forward_step(state, token, self.params)

    def featurize(self, state) -> np.ndarray:
        if state is None:
            return self.params.initial.copy()
        return state.probs.copy()


class StreamLm(BaseLm):
    """Externally driven model: one JSON object per step with "dist" and
    "features" arrays. States are step indices; the stream is expected to
    follow the single trajectory being decoded."""

    def __init__(self, records, vocab: Vocabulary):
        self.vocab = vocab
        self.records = []
        for i, rec in enumerate(records):
            dist = np.asarray(rec["dist"], dtype=np.float64)
            if dist.shape != (vocab.size,):
                raise ValueError(f"step {i}: dist length {dist.shape} != vocab {vocab.size}")
            _validate_rows(dist[None, :], f"step {i} dist")
            self.records.append((dist, np.asarray(rec["features"], dtype=np.float64)))
        if not self.records:
            raise ValueError("empty stream")
        self.feature_dim = self.records[0][1].shape[0]

    @classmethod
    def from_lines(cls, lines, vocab: Vocabulary):
        return cls([json.loads(line) for line in lines if line.strip()], vocab)

    def initial_state(self):
        return 0

    def next_dist(self, state) -> np.ndarray:
        return self.records[state][0]

    def advance(self, state, token: int):
        if state + 1 >= len(self.records):
            return state + 1  # past-the-end is fine once generation stops
        return state + 1

    def featurize(self, state) -> np.ndarray:
        idx = min(state, len(self.records) - 1)
        return self.records[idx][1]


def lm_sample(lm: BaseLm, length: int, rng) -> list[int]:
    """Ancestral sample of `length` tokens; deterministic per seed."""
    gen = as_generator(rng)
    state = lm.initial_state()
    out = []
    for _ in range(length):
        dist = lm.next_dist(state)
        token = int(gen.choice(lm.vocab.size, p=dist / dist.sum()))
        out.append(token)
        state = lm.advance(state, token)
    return out


def check_lm(lm: BaseLm, probe_contexts) -> None:
    """Interface conformance: stochastic rows, deterministic advance,
    consistent feature dimension. Raises on violation."""
    for ctx in probe_contexts:
        s1 = lm.state_after(ctx)
        s2 = lm.state_after(ctx)
        d1, d2 = lm.next_dist(s1), lm.next_dist(s2)
        if not np.array_equal(np.asarray(d1), np.asarray(d2)):
            raise ValueError(f"advance not deterministic on context {ctx}")
        _validate_rows(np.asarray(d1)[None, :], f"context {ctx}")
        f = lm.featurize(s1)
        if np.asarray(f).shape != (lm.feature_dim,):
            raise ValueError("featurize dimension mismatch")


# -- planted generators -------------------------------------------------------


def planted_lm(V: int, favor: float = 0.9) -> TabularLm:
    """Suffix i.i.d. rows favoring whichever token came first."""
    vocab = Vocabulary(size=V)
    uniform = np.full((1, V), 1.0 / V)
    base = np.full((V, V), 1.0 / V)
    switch = {}
    for f in range(V):
        row = np.full(V, (1.0 - favor) / (V - 1))
        row[f] = favor
        switch[f] = np.tile(row, (V, 1))
    return TabularLm(vocab, order=1, tables=[uniform, base], long_range_switch=switch)


def planted_regime_lm(
    V: int = 4, unigram_strength: float = 0.9, local_mix: float = 0.3
) -> TabularLm:
    """Two hidden regimes selected by the first token's parity.

    Within regime r the next token mixes a regime unigram (mass
    `unigram_strength` spread over that regime's preferred half of the
    vocabulary) with a shared +1 cycle on the previous token (`local_mix`).
    The shared cycle makes recent tokens regime-ambiguous, so a small
    filtering encoder loses the regime while the first-token feature keeps
    it; the true conditional law stays exactly order 1 given (first, last).
    """
    if V % 2 != 0:
        raise ValueError("V must be even")
    vocab = Vocabulary(size=V)
    uniform = np.full((1, V), 1.0 / V)
    half = V // 2
    regs = []
    for r in range(2):
        u = np.full(V, (1.0 - unigram_strength) / half)
        u[r * half : (r + 1) * half] = unigram_strength / half
        regs.append(u)
    base = np.full((V, V), 1.0 / V)
    switch = {}
    for f in range(V):
        u = regs[f % 2]
        rows = np.empty((V, V))
        for c in range(V):
            cyc = np.zeros(V)
            cyc[(c + 1) % V] = 1.0
            rows[c] = (1.0 - local_mix) * u + local_mix * cyc
        switch[f] = rows
    return TabularLm(vocab, order=1, tables=[uniform, base], long_range_switch=switch)


# -- serialization -------------------------------------------------------------


def tabular_to_json(lm: TabularLm) -> dict:
    return {
        "vocab": {
            "size": lm.vocab.size,
            "token_names": list(lm.vocab.token_names),
            "eos_id": lm.vocab.eos_id,
        },
        "order": lm.order,
        "tables": [t.tolist() for t in lm.tables],
        "long_range_switch": None
        if lm.long_range_switch is None
        else {str(k): v.tolist() for k, v in lm.long_range_switch.items()},
    }


def tabular_from_json(d: dict) -> TabularLm:
    voc = d["vocab"]
    vocab = Vocabulary(
        size=voc["size"], token_names=tuple(voc.get("token_names") or ()), eos_id=voc.get("eos_id")
    )
    switch = d.get("long_range_switch")
    return TabularLm(
        vocab,
        order=d["order"],
        tables=d["tables"],
        long_range_switch=None if switch is None else {int(k): v for k, v in switch.items()},
    )


def lm_hash(lm: TabularLm) -> str:
    blob = json.dumps(tabular_to_json(lm), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_lm(lm: TabularLm, path):
    with open(path, "w") as f:
        json.dump(tabular_to_json(lm), f)


def load_lm(path) -> TabularLm:
    with open(path) as f:
        return tabular_from_json(json.load(f))
