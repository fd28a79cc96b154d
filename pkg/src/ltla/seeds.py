"""Named RNG substreams derived from a single root seed.

Every random choice in the pipeline flows from one user-visible seed.
Substreams are keyed by name so that e.g. changing the number of decode
samples cannot perturb the dataset stream.
"""

import numpy as np

# Fixed stream ids; appending new names is fine, reordering is not.
_STREAMS = {"data": 1, "init": 2, "decode": 3, "bench": 4}


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of `seed`."""
    try:
        key = _STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown rng stream {name!r}; known: {sorted(_STREAMS)}")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def substream_indexed(seed: int, name: str, index: int) -> np.random.Generator:
    """Per-item generator: deterministic in (seed, name, index) so parallel
    workers produce identical results regardless of scheduling."""
    key = _STREAMS[name]
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(key, int(index)))
    )


def as_generator(rng: np.random.Generator | int) -> np.random.Generator:
    """Accept either a Generator or a raw integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))
