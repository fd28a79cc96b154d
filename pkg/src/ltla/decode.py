"""Constrained generation: reweight base-LM next-token distributions by the
surrogate's probability of eventual constraint satisfaction.

The per-step update is batched over the whole vocabulary: one belief
propagation shared by all candidates, an elementwise emission weighting,
and one contraction against the lookahead layer at the successor automaton
states. No per-candidate encoder calls, no per-candidate loops over the
state spaces.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import lookahead as la
from .base_lm import BaseLm, HmmLm
from .dfa import Dfa, dfa_step
from .encoder import EncoderHead, encode_prior
from .errors import UnsatisfiableAtStep
from .hmm import Belief, HmmParams, filter_prefix, forward_step, propagate
from .lookahead import LookaheadTable
from .seeds import as_generator


@dataclass
class DecodeState:
    tokens: tuple
    lm_state: object
    belief: Belief | None  # None until the chain has started
    dfa_state: int
    lm_loglik: float = 0.0
    guided_loglik: float = 0.0


@dataclass(frozen=True)
class GenConfig:
    mode: str = "sample"  # sample | beam
    beams: int = 16
    max_len: int = 32
    temperature: float = 1.0
    eos_ends: bool = True

    def __post_init__(self):
        if self.mode not in {"sample", "beam"}:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.beams < 1:
            raise ValueError("need at least one beam")


def initial_state(lm: BaseLm, params: HmmParams, d: Dfa, head=None, prompt=()) -> DecodeState:
    tokens = tuple(prompt)
    lm_state = lm.state_after(tokens)
    if head is not None:
        belief = encode_prior(head, lm.featurize(lm_state))
    elif tokens:
        belief = filter_prefix(tokens, params)
    else:
        belief = None
    state = d.start
    for t in tokens:
        state = dfa_step(d, state, t)
    return DecodeState(tokens=tokens, lm_state=lm_state, belief=belief, dfa_state=state)


def _step_components(state: DecodeState, lm: BaseLm, params: HmmParams, d: Dfa, tbl: LookaheadTable):
    """(log lm dist, log satisfaction prob per candidate, surrogate masses)."""
    t = len(state.tokens)
    if t + 1 > tbl.horizon:
        raise ValueError(f"step at position {t} exceeds table horizon {tbl.horizon}")
    lm_dist = np.asarray(lm.next_dist(state.lm_state), dtype=np.float64)
    if state.belief is None:
        u = params.initial
    else:
        u = propagate(state.belief.probs, params.transition)
    weighted = u[:, None] * params.emission_dense()  # (H, V)
    masses = weighted.sum(axis=0)
    successors = d.step_row(state.dfa_state)
    gathered = tbl.table[t + 1][:, successors]  # (H, V)
    numer = (weighted * gathered).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(masses > 0.0, numer / np.maximum(masses, 1e-300), 0.0)
        log_lm = np.log(lm_dist)
        log_cond = np.where(cond > 0.0, np.log(np.maximum(cond, 1e-300)), -np.inf)
    return log_lm, log_cond, masses


def step_scores(
    state: DecodeState, lm: BaseLm, params: HmmParams, d: Dfa, tbl: LookaheadTable
) -> np.ndarray:
    """Guided log-score per candidate token:
    log p_lm(v | prefix) + log p(constraint | prefix, v)."""
    log_lm, log_cond, _ = _step_components(state, lm, params, d, tbl)
    return log_lm + log_cond


def _adjust(log_lm, log_cond, params: HmmParams, d: Dfa, state: DecodeState, cfg: GenConfig):
    """Temperature on the base-LM term only, plus the eos mask while the
    automaton has not accepted yet."""
    scores = log_lm / cfg.temperature + log_cond
    eos = params.vocab.eos_id
    if eos is not None and state.dfa_state not in d.accept:
        scores = scores.copy()
        scores[eos] = -np.inf
    return scores


def _advance(
    state: DecodeState,
    token: int,
    log_lm_tok: float,
    guided_log: float,
    lm: BaseLm,
    params: HmmParams,
    d: Dfa,
    head,
) -> DecodeState:
    new_lm_state = lm.advance(state.lm_state, token)
    if head is not None:
        belief = encode_prior(head, lm.featurize(new_lm_state))
    elif state.belief is None:
        from .hmm import _seed_step

        belief = _seed_step(token, params)
    else:
        belief = forward_step(state.belief, token, params)
    return DecodeState(
        tokens=state.tokens + (token,),
        lm_state=new_lm_state,
        belief=belief,
        dfa_state=dfa_step(d, state.dfa_state, token),
        lm_loglik=state.lm_loglik + log_lm_tok,
        guided_loglik=state.guided_loglik + guided_log,
    )


def _satisfiable(state: DecodeState, params: HmmParams, d: Dfa, tbl: LookaheadTable) -> float:
    t = len(state.tokens)
    if t == 0:
        return la.initial_event_prob(params, d, tbl)
    return la.query_event_prob(state.belief, state.dfa_state, tbl, t)


def sample_generate(
    lm: BaseLm,
    params: HmmParams,
    d: Dfa,
    tbl: LookaheadTable,
    cfg: GenConfig,
    rng,
    head: EncoderHead | None = None,
    prompt=(),
):
    """Ancestral sampling from the normalized guided scores.

    Returns (tokens, diagnostics). Every complete output is accepted by the
    automaton: the end token stays masked until acceptance and the
    lookahead zeroes any branch from which acceptance is unreachable.
    """
    if cfg.max_len > tbl.horizon:
        raise ValueError("max_len exceeds the table horizon")
    gen = as_generator(rng)
    state = initial_state(lm, params, d, head=head, prompt=prompt)
    if _satisfiable(state, params, d, tbl) <= 0.0:
        raise UnsatisfiableAtStep(len(state.tokens))
    steps = []
    eos = params.vocab.eos_id
    while len(state.tokens) < cfg.max_len:
        log_lm, log_cond, _ = _step_components(state, lm, params, d, tbl)
        scores = _adjust(log_lm, log_cond, params, d, state, cfg)
        finite = np.isfinite(scores)
        if not finite.any():
            raise UnsatisfiableAtStep(len(state.tokens))
        shifted = scores - scores[finite].max()
        probs = np.where(finite, np.exp(shifted), 0.0)
        probs = probs / probs.sum()
        token = int(gen.choice(params.vocab.size, p=probs))
        steps.append(
            {
                "position": len(state.tokens),
                "token": token,
                "lm_logprob": float(log_lm[token]),
                "event_prob": float(np.exp(log_cond[token])),
                "guided_prob": float(probs[token]),
            }
        )
        state = _advance(
            state, token, float(log_lm[token]), float(np.log(probs[token])), lm, params, d, head
        )
        if cfg.eos_ends and eos is not None and token == eos:
            break
    diagnostics = {
        "steps": steps,
        "accepted": state.dfa_state in d.accept,
        "lm_loglik": state.lm_loglik,
        "guided_loglik": state.guided_loglik,
    }
    return list(state.tokens), diagnostics


@dataclass
class Hypothesis:
    tokens: tuple
    lm_loglik: float
    guided_loglik: float
    accepted: bool


@dataclass
class BeamResult:
    hypotheses: list
    constraint_met: bool
    best_partial: Hypothesis | None = None

    @property
    def best(self) -> Hypothesis | None:
        return self.hypotheses[0] if self.hypotheses else self.best_partial


def beam_generate(
    lm: BaseLm,
    params: HmmParams,
    d: Dfa,
    tbl: LookaheadTable,
    cfg: GenConfig,
    head: EncoderHead | None = None,
    prompt=(),
) -> BeamResult:
    """Beam expansion by accumulated guided score; accepted hypotheses are
    re-ranked by accumulated base-LM loglik. Deterministic: ties break by
    shorter length, then lexicographic tokens."""
    if cfg.max_len > tbl.horizon:
        raise ValueError("max_len exceeds the table horizon")
    eos = params.vocab.eos_id
    start = initial_state(lm, params, d, head=head, prompt=prompt)
    beams = [start]
    finished = []
    while beams and len(beams[0].tokens) < cfg.max_len:
        candidates = []
        for beam in beams:
            log_lm, log_cond, _ = _step_components(beam, lm, params, d, tbl)
            scores = _adjust(log_lm, log_cond, params, d, beam, cfg)
            for v in np.flatnonzero(np.isfinite(scores)):
                v = int(v)
                candidates.append(
                    (beam.guided_loglik + float(scores[v]), beam, v, float(log_lm[v]), float(scores[v]))
                )
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1].tokens + (c[2],)))
        next_beams = []
        for total, beam, v, lm_log, score in candidates[: cfg.beams]:
            new = _advance(beam, v, lm_log, score, lm, params, d, head)
            if cfg.eos_ends and eos is not None and v == eos:
                finished.append(
                    Hypothesis(new.tokens, new.lm_loglik, new.guided_loglik, new.dfa_state in d.accept)
                )
            else:
                next_beams.append(new)
        beams = next_beams
    for beam in beams:
        finished.append(
            Hypothesis(beam.tokens, beam.lm_loglik, beam.guided_loglik, beam.dfa_state in d.accept)
        )
    accepted = [h for h in finished if h.accepted]
    order = lambda h: (-h.lm_loglik, len(h.tokens), h.tokens)
    if accepted:
        return BeamResult(hypotheses=sorted(accepted, key=order), constraint_met=True)
    best_partial = sorted(finished, key=order)[0] if finished else None
    return BeamResult(hypotheses=[], constraint_met=False, best_partial=best_partial)


# -- timing harness ------------------------------------------------------------


def slope_ci(x, y, confidence: float = 0.95):
    """OLS slope with its two-sided confidence interval."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    se = np.sqrt((resid**2).sum() / (n - 2) / sxx)
    tq = stats.t.ppf(0.5 + confidence / 2.0, df=n - 2)
    return float(slope), (float(slope - tq * se), float(slope + tq * se))


def bench_decode(
    params: HmmParams,
    d: Dfa,
    horizon: int,
    num_prefixes: int = 100,
    seed: int = 0,
    max_len: int | None = None,
) -> dict:
    """Per-step decode cost, amortized mode vs deliberate rebuild-per-prefix.

    The amortized mode builds the lookahead table once and updates the
    belief incrementally. The naive mode treats every prefix as fresh: it
    rebuilds the full table and refilters the whole prefix at every step,
    which makes per-step time grow with the prefix length and whole-decode
    time quadratic.
    """
    max_len = horizon if max_len is None else max_len
    lm = HmmLm(params)
    gen = as_generator(seed)
    la.reset_build_counts()

    tbl = la.precompute_dfa_table(params, d, horizon)
    # warm-up decode so allocations and jit caches are settled
    _timed_decode(lm, params, d, tbl, max_len, gen, naive=False)

    ltla_times = []
    for _ in range(num_prefixes):
        ltla_times.extend(_timed_decode(lm, params, d, tbl, max_len, gen, naive=False))
    builds_after_ltla = dict(la.BUILD_COUNTS)

    naive_times = []
    for _ in range(num_prefixes):
        naive_times.extend(_timed_decode(lm, params, d, tbl, max_len, gen, naive=True))

    lx, ly = zip(*ltla_times)
    nx, ny = zip(*naive_times)
    ltla_slope, ltla_ci = slope_ci(lx, ly)
    naive_slope, naive_ci = slope_ci(nx, ny)
    return {
        "ltla": {"slope_us_per_step": ltla_slope * 1e6, "ci_us": tuple(v * 1e6 for v in ltla_ci)},
        "naive": {"slope_us_per_step": naive_slope * 1e6, "ci_us": tuple(v * 1e6 for v in naive_ci)},
        "table_builds_ltla": builds_after_ltla,
        "num_prefixes": num_prefixes,
        "steps_per_decode": max_len,
    }


def _timed_decode(lm, params, d, tbl, max_len, gen, naive: bool):
    """One greedy-ish decode, returning (position, seconds) per step."""
    state = initial_state(lm, params, d)
    times = []
    for _ in range(max_len):
        t = len(state.tokens)
        t0 = time.perf_counter()
        if naive:
            fresh_tbl = la.precompute_dfa_table(params, d, tbl.horizon)
            if t > 0:
                fresh_belief = filter_prefix(state.tokens, params)
                probe = DecodeState(
                    tokens=state.tokens,
                    lm_state=state.lm_state,
                    belief=fresh_belief,
                    dfa_state=state.dfa_state,
                )
            else:
                probe = state
            log_lm, log_cond, _ = _step_components(probe, lm, params, d, fresh_tbl)
        else:
            log_lm, log_cond, _ = _step_components(state, lm, params, d, tbl)
        elapsed = time.perf_counter() - t0
        times.append((t, elapsed))
        scores = log_lm + log_cond
        finite = np.isfinite(scores)
        if not finite.any():
            break
        shifted = scores - scores[finite].max()
        probs = np.where(finite, np.exp(shifted), 0.0)
        probs = probs / probs.sum()
        token = int(gen.choice(params.vocab.size, p=probs))
        state = _advance(state, token, float(log_lm[token]), 0.0, lm, params, d, None)
    return times
