"""Deterministic finite automata over token alphabets.

Keyword-inclusion constraints compile to the product of per-keyword
substring acceptors (failure-link construction, absorbing accept state per
keyword), pruned to reachable states. The transition table is dense up to
S*V <= 2^20 entries and a per-state default plus exception edges above
that; `edge_count` reports the number of explicitly stored edges.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StateCapExceeded
from .hmm import Vocabulary

DENSE_CELL_CAP = 1 << 20
DEFAULT_STATE_CAP = 1 << 17


@dataclass
class Dfa:
    num_states: int
    num_tokens: int
    start: int
    accept: frozenset
    delta: np.ndarray | None = None  # dense (S, V) table
    defaults: np.ndarray | None = None  # sparse: per-state default target
    edges: list | None = None  # sparse: per-state {token: target}
    _accept_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.accept = frozenset(int(a) for a in self.accept)
        if not 0 <= self.start < self.num_states:
            raise ValueError("start state out of range")
        if any(not 0 <= a < self.num_states for a in self.accept):
            raise ValueError("accept state out of range")
        if self.delta is not None:
            self.delta = np.asarray(self.delta, dtype=np.int64)
            if self.delta.shape != (self.num_states, self.num_tokens):
                raise ValueError("delta must be (num_states, num_tokens)")
            if self.delta.size and (self.delta.min() < 0 or self.delta.max() >= self.num_states):
                raise ValueError("delta targets out of range")
        elif self.defaults is None or self.edges is None:
            raise ValueError("need either a dense delta or sparse defaults+edges")
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.accept)] = True
        self._accept_mask = mask

    @property
    def is_dense(self) -> bool:
        return self.delta is not None

    @property
    def edge_count(self) -> int:
        if self.is_dense:
            return self.num_states * self.num_tokens
        return sum(len(e) for e in self.edges)

    def accept_mask(self) -> np.ndarray:
        return self._accept_mask

    def step_row(self, state: int) -> np.ndarray:
        """Successor for every token from `state`, as a (V,) array."""
        if self.is_dense:
            return self.delta[state]
        row = np.full(self.num_tokens, self.defaults[state], dtype=np.int64)
        for token, target in self.edges[state].items():
            row[token] = target
        return row

    def dense_delta(self) -> np.ndarray:
        if self.is_dense:
            return self.delta
        return np.stack([self.step_row(s) for s in range(self.num_states)])


def dfa_step(d: Dfa, state: int, token: int) -> int:
    if not 0 <= state < d.num_states:
        raise ValueError(f"state {state} out of range")
    if not 0 <= token < d.num_tokens:
        raise ValueError(f"token {token} out of range")
    if d.is_dense:
        return int(d.delta[state, token])
    return int(d.edges[state].get(token, d.defaults[state]))


def run(d: Dfa, seq) -> int:
    state = d.start
    for token in seq:
        state = dfa_step(d, state, token)
    return state


def accepts(d: Dfa, seq) -> bool:
    return run(d, seq) in d.accept


@dataclass(frozen=True)
class KeywordSpec:
    keywords: tuple
    mode: str = "all_must_appear"

    def __post_init__(self):
        object.__setattr__(self, "keywords", tuple(tuple(int(t) for t in kw) for kw in self.keywords))
        if self.mode != "all_must_appear":
            raise ValueError(f"unsupported keyword mode {self.mode!r}")
        if any(len(kw) == 0 for kw in self.keywords):
            raise ValueError("keywords must be nonempty")


def accept_all_dfa(num_tokens: int) -> Dfa:
    return Dfa(
        num_states=1,
        num_tokens=num_tokens,
        start=0,
        accept=frozenset({0}),
        delta=np.zeros((1, num_tokens), dtype=np.int64),
    )


def substring_dfa(keyword, num_tokens: int) -> Dfa:
    """Accepts exactly the strings containing `keyword` as a contiguous run."""
    kw = [int(t) for t in keyword]
    if not kw:
        raise ValueError("keyword must be nonempty")
    if any(not 0 <= t < num_tokens for t in kw):
        raise ValueError("keyword token out of range")
    L = len(kw)
    delta = np.zeros((L + 1, num_tokens), dtype=np.int64)
    delta[0, kw[0]] = 1
    x = 0  # failure state tracker
    for j in range(1, L):
        delta[j, :] = delta[x, :]
        delta[j, kw[j]] = j + 1
        x = int(delta[x, kw[j]])
    delta[L, :] = L  # absorbing accept
    return Dfa(num_states=L + 1, num_tokens=num_tokens, start=0, accept=frozenset({L}), delta=delta)


def _finish(rows, start, accept_set, num_tokens) -> Dfa:
    num_states = len(rows)
    if num_states * num_tokens <= DENSE_CELL_CAP:
        return Dfa(
            num_states=num_states,
            num_tokens=num_tokens,
            start=start,
            accept=frozenset(accept_set),
            delta=np.stack(rows),
        )
    defaults = np.zeros(num_states, dtype=np.int64)
    edges = []
    for s, row in enumerate(rows):
        values, counts = np.unique(row, return_counts=True)
        default = int(values[np.argmax(counts)])
        defaults[s] = default
        edges.append({int(t): int(w) for t, w in enumerate(row) if w != default})
    return Dfa(
        num_states=num_states,
        num_tokens=num_tokens,
        start=start,
        accept=frozenset(accept_set),
        defaults=defaults,
        edges=edges,
    )


def product(d1: Dfa, d2: Dfa, max_states: int = DEFAULT_STATE_CAP) -> Dfa:
    """Intersection of the two languages, pruned to reachable pair states."""
    if d1.num_tokens != d2.num_tokens:
        raise ValueError("alphabets differ")
    V = d1.num_tokens
    index = {(d1.start, d2.start): 0}
    frontier = [(d1.start, d2.start)]
    rows = []
    accept_set = set()
    while frontier:
        pair = frontier.pop()
        s1, s2 = pair
        row1 = d1.step_row(s1)
        row2 = d2.step_row(s2)
        row = np.empty(V, dtype=np.int64)
        for v in range(V):
            nxt = (int(row1[v]), int(row2[v]))
            if nxt not in index:
                if len(index) >= max_states:
                    raise StateCapExceeded(max_states)
                index[nxt] = len(index)
                frontier.append(nxt)
            row[v] = index[nxt]
        while len(rows) <= index[pair]:
            rows.append(None)
        rows[index[pair]] = row
        if s1 in d1.accept and s2 in d2.accept:
            accept_set.add(index[pair])
    return _finish(rows, 0, accept_set, V)


def build_keyword_dfa(
    spec: KeywordSpec, vocab: Vocabulary, max_states: int = DEFAULT_STATE_CAP
) -> Dfa:
    """DFA accepting exactly the sequences containing every keyword."""
    if len(spec.keywords) > 8:
        raise ValueError("at most 8 keywords are supported")
    for kw in spec.keywords:
        if any(t >= vocab.size for t in kw):
            raise ValueError("keyword token out of vocabulary range")
    result = accept_all_dfa(vocab.size)
    for kw in spec.keywords:
        result = product(result, substring_dfa(kw, vocab.size), max_states=max_states)
    return result


def parse_keyword_text(text: str, vocab: Vocabulary) -> KeywordSpec:
    """One keyword per line, each tokenized through the vocabulary."""
    keywords = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        keywords.append(tuple(vocab.tokenize(line)))
    return KeywordSpec(keywords=tuple(keywords))


# -- serialization -----------------------------------------------------------


def to_json_dict(d: Dfa) -> dict:
    doc = {
        "num_states": d.num_states,
        "num_tokens": d.num_tokens,
        "start": d.start,
        "accept": sorted(d.accept),
    }
    if d.is_dense:
        doc["delta"] = d.delta.tolist()
    else:
        doc["storage"] = "sparse"
        doc["defaults"] = d.defaults.tolist()
        doc["edges"] = [{str(t): w for t, w in e.items()} for e in d.edges]
    return doc


def from_json_dict(doc: dict) -> Dfa:
    if doc.get("storage") == "sparse":
        return Dfa(
            num_states=doc["num_states"],
            num_tokens=doc["num_tokens"],
            start=doc["start"],
            accept=frozenset(doc["accept"]),
            defaults=np.asarray(doc["defaults"], dtype=np.int64),
            edges=[{int(t): int(w) for t, w in e.items()} for e in doc["edges"]],
        )
    delta = np.asarray(doc["delta"], dtype=np.int64)
    return Dfa(
        num_states=doc["num_states"],
        num_tokens=delta.shape[1] if "num_tokens" not in doc else doc["num_tokens"],
        start=doc["start"],
        accept=frozenset(doc["accept"]),
        delta=delta,
    )


def constraint_hash(d: Dfa) -> str:
    blob = json.dumps(to_json_dict(d), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
