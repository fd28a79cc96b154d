"""Brute-force enumeration references.

Everything here is deliberately plain loops over explicitly enumerated
continuations or latent paths, sharing no code with the fast paths it
validates. Hard size guards raise instead of truncating.
"""

import itertools
import math

import numpy as np

from .base_lm import BaseLm
from .dfa import Dfa
from .errors import SizeGuardExceeded
from .hmm import HmmParams
from .lookahead import QuerySpec, eos_within_dfa

SIZE_CAP = 10**6


def _guard(V: int, n: int, what: str):
    if V**n > SIZE_CAP:
        raise SizeGuardExceeded(V**n, SIZE_CAP, what)


class _NaiveHmm:
    """Minimal unnormalized forward pass over dense copies of the operators."""

    def __init__(self, params: HmmParams):
        self.pi = params.initial.copy()
        self.A = params.transition_dense().copy()
        self.B = params.emission_dense().copy()

    def prefix_prob(self, tokens) -> float:
        alpha = None
        for x in tokens:
            if alpha is None:
                alpha = self.pi * self.B[:, x]
            else:
                alpha = (alpha @ self.A) * self.B[:, x]
        return 1.0 if alpha is None else float(alpha.sum())

    def cond_prob(self, context, continuation) -> float:
        denom = self.prefix_prob(context)
        if denom == 0.0:
            raise ZeroDivisionError("context has zero probability under the model")
        return self.prefix_prob(list(context) + list(continuation)) / denom

    def cond_prob_from_state(self, z: int, continuation) -> float:
        alpha = np.zeros(self.pi.shape[0])
        alpha[z] = 1.0
        for x in continuation:
            alpha = (alpha @ self.A) * self.B[:, x]
        return float(alpha.sum())


def _cond_prob_fn(model, context):
    """continuation -> p(continuation | context), literal stepwise product."""
    if isinstance(model, HmmParams):
        naive = _NaiveHmm(model)
        return lambda cont: naive.cond_prob(context, cont)

    def fn(cont):
        state = model.state_after(context)
        p = 1.0
        for x in cont:
            p *= float(model.next_dist(state)[x])
            state = model.advance(state, x)
        return p

    return fn


def _vocab_size(model) -> int:
    if isinstance(model, HmmParams):
        return model.vocab.size
    return model.vocab.size


def _indicator(constraint, context, V):
    """continuation -> 0/1 membership for the event."""
    if isinstance(constraint, Dfa):
        state0 = constraint.start
        for x in context:
            state0 = int(constraint.step_row(state0)[x])

        def ind(cont):
            s = state0
            for x in cont:
                s = int(constraint.step_row(s)[x])
            return 1.0 if s in constraint.accept else 0.0

        return ind
    if isinstance(constraint, QuerySpec):
        if constraint.kind == "dfa_accept":
            return _indicator(constraint.dfa, context, V)
        if constraint.kind == "token_at_offset":
            k, v = constraint.offset, constraint.token
            return lambda cont: 1.0 if len(cont) >= k and cont[k - 1] == v else 0.0
        if constraint.kind == "eos_within":
            raise ValueError("eos_within needs the vocabulary; pass its DFA instead")
    raise TypeError(f"unsupported constraint {constraint!r}")


def enumerate_event_prob(model, context, constraint, horizon: int) -> float:
    """Literal sum over all V^horizon continuations of p(cont | ctx) * 1{event}.

    For classifier constraints the enumerated quantity is the expected
    future factor, combined into the attribute probability exactly as the
    fast path defines it.
    """
    V = _vocab_size(model)
    _guard(V, horizon, "event probability enumeration")
    cond = _cond_prob_fn(model, context)
    if isinstance(constraint, QuerySpec) and constraint.kind == "classifier_attr":
        clf = constraint.classifier
        expected = 0.0
        for cont in itertools.product(range(V), repeat=horizon):
            expected += cond(cont) * math.exp(sum(clf.weights[x] for x in cont))
        logit = clf.bias + clf.context_score(context) + math.log(expected)
        return 1.0 / (1.0 + math.exp(-logit))
    if isinstance(constraint, QuerySpec) and constraint.kind == "eos_within":
        eos = model.vocab.eos_id
        constraint = eos_within_dfa(constraint.offset, eos, V)
        # the window opens at the query point, so do not advance on context
        ind = _indicator(constraint, (), V)
    else:
        ind = _indicator(constraint, context, V)
    total = 0.0
    for cont in itertools.product(range(V), repeat=horizon):
        w = ind(cont)
        if w:
            total += cond(cont) * w
    return total


def continuation_index(cont, V: int) -> int:
    idx = 0
    for x in cont:
        idx = idx * V + x
    return idx


def enumerate_continuation_dist(model, context, horizon: int) -> np.ndarray:
    """Exact conditional distribution over all V^horizon continuations,
    indexed by `continuation_index`."""
    V = _vocab_size(model)
    _guard(V, horizon, "continuation distribution enumeration")
    cond = _cond_prob_fn(model, context)
    out = np.empty(V**horizon)
    for i, cont in enumerate(itertools.product(range(V), repeat=horizon)):
        out[i] = cond(cont)
    return out


def _mutual_information(joint: np.ndarray) -> float:
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    total = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            p = joint[i, j]
            if p > 0.0:
                total += p * math.log(p / (pa[i] * pb[j]))
    return total


def enumerate_mutual_information(params: HmmParams, t: int, n: int) -> float:
    """Exact I(X_{<t}; X_{>=t}) of the HMM joint over length-n sequences."""
    V = params.vocab.size
    _guard(V, n, "mutual information enumeration")
    if not 1 <= t <= n:
        raise ValueError("split must satisfy 1 <= t <= n")
    naive = _NaiveHmm(params)
    na, nb = t - 1, n - t + 1
    joint = np.zeros((V**na, V**nb))
    for a in itertools.product(range(V), repeat=na):
        for b in itertools.product(range(V), repeat=nb):
            joint[continuation_index(a, V), continuation_index(b, V)] = naive.prefix_prob(a + b)
    return _mutual_information(joint)


def enumerate_mutual_information_chain(
    context_model: BaseLm, prior_fn, params: HmmParams, t: int, n: int
) -> float:
    """I(context; continuation) for the chain context -> latent prior ->
    decoder continuation. prior_fn maps a context tuple to a distribution
    over the hidden state; the decoder is the HMM."""
    V = params.vocab.size
    _guard(V, n, "mutual information enumeration")
    if not 1 <= t <= n:
        raise ValueError("split must satisfy 1 <= t <= n")
    naive = _NaiveHmm(params)
    H = params.hidden_size
    na, nb = t - 1, n - t + 1
    joint = np.zeros((V**na, V**nb))
    for a in itertools.product(range(V), repeat=na):
        pa = 1.0
        st = context_model.initial_state()
        for x in a:
            pa *= float(context_model.next_dist(st)[x])
            st = context_model.advance(st, x)
        prior = np.asarray(prior_fn(a), dtype=np.float64)
        for b in itertools.product(range(V), repeat=nb):
            pb = sum(prior[z] * naive.cond_prob_from_state(z, b) for z in range(H))
            joint[continuation_index(a, V), continuation_index(b, V)] = pa * pb
    return _mutual_information(joint)
