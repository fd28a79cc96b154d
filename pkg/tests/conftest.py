import numpy as np
import pytest

from ltla import hmm


def make_params(pi, trans, emis, max_len=16):
    pi = np.asarray(pi, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    emis = np.asarray(emis, dtype=np.float64)
    return hmm.HmmParams(
        hidden_size=pi.shape[0],
        vocab=hmm.Vocabulary(size=emis.shape[1]),
        initial=pi,
        transition=trans,
        emission=emis,
        max_len=max_len,
    )


@pytest.fixture
def canonical_params():
    """Two states, two tokens: the worked example used across modules."""
    return make_params([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [[0.8, 0.2], [0.2, 0.8]])


def random_params(rng, H, V, max_len=16, floor=0.05):
    def rows(r, c):
        raw = rng.uniform(floor, 1.0, size=(r, c))
        return raw / raw.sum(axis=1, keepdims=True)

    return make_params(rows(1, H)[0], rows(H, H), rows(H, V), max_len=max_len)


def random_dfa(rng, S, V):
    from ltla.dfa import Dfa

    delta = rng.integers(0, S, size=(S, V))
    accept = set(int(s) for s in np.flatnonzero(rng.random(S) < 0.5))
    if not accept:
        accept = {int(rng.integers(0, S))}
    return Dfa(num_states=S, num_tokens=V, start=0, accept=frozenset(accept), delta=delta)
