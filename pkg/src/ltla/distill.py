"""Distillation pipeline: sample context/continuation data from a base LM,
fit HMM surrogates by expectation-maximization, and score surrogates with
per-continuation-token perplexity, stratified by continuation length."""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels, monarch
from .base_lm import BaseLm, TabularLm, lm_hash, lm_sample
from .encoder import EncoderHead, encode_prior
from .hmm import Belief, HmmParams, Vocabulary
from .seeds import substream

LOG_FLOOR = -30.0  # per-token penalty for zero-mass events in reports
BUCKETS = ((1, 2), (3, 4), (5, 8), (9, 16), (17, 31))


@dataclass(frozen=True)
class DistillRecord:
    context: tuple
    continuation: tuple
    features: np.ndarray


@dataclass
class DistillDataset:
    records: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def sample_dataset(lm: BaseLm, n: int, length: int, seed: int) -> DistillDataset:
    """n sequences of the given length, each split uniformly at random into
    a nonempty context and continuation; features are taken at the split."""
    if n < 1:
        raise ValueError("need at least one record")
    if length < 2:
        raise ValueError("length must allow a nonempty context and continuation")
    rng = substream(seed, "data")
    records = []
    for _ in range(n):
        seq = lm_sample(lm, length, rng)
        split = int(rng.integers(1, length))
        context = tuple(seq[:split])
        continuation = tuple(seq[split:])
        features = lm.featurize(lm.state_after(context))
        records.append(DistillRecord(context, continuation, features))
    meta = {"T": length, "seed": seed, "n": n}
    if isinstance(lm, TabularLm):
        meta["source_lm"] = lm_hash(lm)
    return DistillDataset(records=records, metadata=meta)


def save_dataset(ds: DistillDataset, path):
    with open(path, "w") as f:
        f.write(json.dumps({"__meta__": ds.metadata}) + "\n")
        for rec in ds.records:
            f.write(
                json.dumps(
                    {
                        "context": list(rec.context),
                        "continuation": list(rec.continuation),
                        "features": rec.features.tolist(),
                    }
                )
                + "\n"
            )


def load_dataset(path) -> DistillDataset:
    records = []
    meta = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            if "__meta__" in doc:
                meta = doc["__meta__"]
                continue
            records.append(
                DistillRecord(
                    tuple(doc["context"]),
                    tuple(doc["continuation"]),
                    np.asarray(doc["features"], dtype=np.float64),
                )
            )
    return DistillDataset(records=records, metadata=meta)


# -- EM training ---------------------------------------------------------------


def _random_stochastic(rng, rows: int, cols: int) -> np.ndarray:
    raw = rng.uniform(0.2, 1.0, size=(rows, cols))
    return raw / raw.sum(axis=1, keepdims=True)


def _accumulate_counts(seqs, initial, trans, emis):
    """E-step counts over sequences grouped by length."""
    H, V = emis.shape
    init_acc = np.zeros(H)
    trans_acc = np.zeros((H, H))
    emis_acc = np.zeros((H, V))
    loglik = 0.0
    by_len = {}
    for s in seqs:
        by_len.setdefault(len(s), []).append(s)
    for L, group in sorted(by_len.items()):
        arr = np.asarray(group, dtype=np.int64).reshape(len(group), L)
        ia, ta, ea, ll = kernels.em_accumulate(arr, initial, trans, emis)
        init_acc += ia
        trans_acc += ta
        emis_acc += ea
        loglik += ll
    return init_acc, trans_acc, emis_acc, loglik


def _normalize_counts(counts: np.ndarray, rng, what: str) -> np.ndarray:
    sums = counts.sum(axis=1)
    dead = sums <= 0.0
    if np.any(dead):
        warnings.warn(f"{what}: {int(dead.sum())} state(s) received no posterior mass; re-jittered")
        counts = counts.copy()
        counts[dead] = rng.uniform(0.5, 1.5, size=(int(dead.sum()), counts.shape[1]))
        sums = counts.sum(axis=1)
    return counts / sums[:, None]


def em_train_hmm(
    sequences,
    hidden_size: int,
    vocab: Vocabulary,
    init_seed: int,
    iters: int,
    kind: str = "dense",
    block_size: int | None = None,
    max_len: int | None = None,
    mstep_steps: int = 60,
):
    """Baum-Welch. Returns (params, per-iteration loglik history).

    The dense M-step is the closed form; the Monarch M-step runs gradient
    ascent on the expected-count objective and keeps the best iterate, so
    the EM surrogate objective never decreases.
    """
    if iters < 1:
        raise ValueError("need at least one EM iteration")
    rng = np.random.default_rng(init_seed)
    V = vocab.size
    if max_len is None:
        max_len = max(len(s) for s in sequences)
    initial = _random_stochastic(rng, 1, hidden_size)[0]
    if kind == "dense":
        trans_op = _random_stochastic(rng, hidden_size, hidden_size)
        emis_op = _random_stochastic(rng, hidden_size, V)
    elif kind == "monarch":
        if block_size is None:
            raise ValueError("monarch training requires a block size")
        trans_op = monarch.random_monarch(hidden_size, hidden_size, block_size, rng, spread=0.3)
        emis_op = monarch.random_monarch(hidden_size, V, block_size, rng, spread=0.3)
    else:
        raise ValueError(f"unknown parameterization {kind!r}")

    history = []
    for _ in range(iters):
        trans_dense = trans_op if kind == "dense" else monarch.materialize(trans_op)
        emis_dense = emis_op if kind == "dense" else monarch.materialize(emis_op)
        init_acc, trans_acc, emis_acc, loglik = _accumulate_counts(
            sequences, initial, trans_dense, emis_dense
        )
        history.append(loglik)
        initial = init_acc / init_acc.sum()
        if kind == "dense":
            trans_op = _normalize_counts(trans_acc, rng, "transition")
            emis_op = _normalize_counts(emis_acc, rng, "emission")
        else:
            trans_op = monarch.fit_to_counts(trans_op, trans_acc, steps=mstep_steps)
            emis_op = monarch.fit_to_counts(emis_op, emis_acc, steps=mstep_steps)
    params = HmmParams(
        hidden_size=hidden_size,
        vocab=vocab,
        initial=initial,
        transition=trans_op,
        emission=emis_op,
        max_len=max_len,
    )
    return params, history


def joint_finetune(
    head,
    dataset,
    params: HmmParams,
    rounds: int = 8,
    encoder_steps: int = 300,
    encoder_cfg=None,
    seed: int = 0,
    mstep_steps: int = 60,
    trans_smoothing: float = 0.0,
):
    """Alternate conditional-likelihood training of decoder and encoder.

    Each round runs one conditional EM step for the transition and emission
    operators (the prior over the split state comes from the current head,
    and the boundary transition is counted) followed by a block of encoder
    updates against the refreshed decoder. The initial distribution stays
    as fitted by the joint EM phase; continuations never touch it.

    trans_smoothing mixes the uniform row into each transition M-step,
    a pseudocount regularizer that bounds how deterministic the fitted
    dynamics can get.

    Returns (head, params, per-round conditional loglik history).
    """
    from . import encoder as enc_mod

    feats = np.stack([np.asarray(r.features, dtype=np.float64) for r in dataset])
    groups = _group_by_continuation_length(dataset)
    toks_by_len = {
        L: (idxs, np.array([list(dataset[i].continuation) for i in idxs], dtype=np.int64))
        for L, idxs in groups.items()
    }
    rng = np.random.default_rng(seed)
    history = []
    monarch_kind = isinstance(params.transition, monarch.MonarchMatrix)
    trans_op, emis_op = params.transition, params.emission
    pairs = [(r.features, r.continuation) for r in dataset]
    for rnd in range(rounds):
        priors = enc_mod.encode_prior_batch(head, feats)
        trans_dense = monarch.materialize(trans_op) if monarch_kind else trans_op
        emis_dense = monarch.materialize(emis_op) if monarch_kind else emis_op
        H, V = emis_dense.shape
        trans_acc = np.zeros((H, H))
        emis_acc = np.zeros((H, V))
        loglik = 0.0
        for L, (idxs, toks) in sorted(toks_by_len.items()):
            ta, ea, ll = kernels.cond_em_accumulate(toks, priors[idxs], trans_dense, emis_dense)
            trans_acc += ta
            emis_acc += ea
            loglik += ll
        history.append(loglik)
        if monarch_kind:
            trans_op = monarch.fit_to_counts(trans_op, trans_acc, steps=mstep_steps)
            emis_op = monarch.fit_to_counts(emis_op, emis_acc, steps=mstep_steps)
        else:
            trans_op = _normalize_counts(trans_acc, rng, "transition")
            if trans_smoothing > 0.0:
                H = trans_op.shape[0]
                trans_op = (1.0 - trans_smoothing) * trans_op + trans_smoothing / H
            emis_op = _normalize_counts(emis_acc, rng, "emission")
        params = HmmParams(
            hidden_size=params.hidden_size,
            vocab=params.vocab,
            initial=params.initial,
            transition=trans_op,
            emission=emis_op,
            max_len=params.max_len,
        )
        cfg = encoder_cfg or enc_mod.default_train_config(head.variant)
        cfg = enc_mod.TrainConfig(
            learning_rate=cfg.learning_rate,
            batch_size=cfg.batch_size,
            steps=encoder_steps,
            seed=seed + 1000 * rnd,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            clip_norm=cfg.clip_norm,
        )
        head, _ = enc_mod.train_encoder(head, pairs, params, cfg)
    return head, params, history


# -- scoring -------------------------------------------------------------------


def _score_continuations(beliefs: np.ndarray, toks: np.ndarray, trans, emis):
    """Per-record continuation loglik with the zero-mass floor.

    A zero-mass token contributes LOG_FLOOR and resets the belief to
    uniform; the floored-token count is reported alongside.
    """
    N, L = toks.shape
    H = trans.shape[0]
    ll = np.zeros(N)
    floored = np.zeros(N, dtype=np.int64)
    belief = beliefs.copy()
    for i in range(L):
        u = belief @ trans
        w = u * emis[:, toks[:, i]].T
        mass = w.sum(axis=1)
        ok = mass > 0.0
        with np.errstate(divide="ignore"):
            ll += np.where(ok, np.log(np.maximum(mass, 1e-300)), LOG_FLOOR)
        floored += (~ok).astype(np.int64)
        belief = np.where(ok[:, None], w / np.maximum(mass, 1e-300)[:, None], 1.0 / H)
    return ll, floored


def _group_by_continuation_length(dataset):
    groups = {}
    for i, rec in enumerate(dataset):
        groups.setdefault(len(rec.continuation), []).append(i)
    return groups


class HmmSurrogate:
    """Standard surrogate: the prior over the hidden state comes from HMM
    filtering of the context."""

    def __init__(self, params: HmmParams):
        self.params = params

    def priors(self, dataset) -> np.ndarray:
        params = self.params
        H = params.hidden_size
        trans = params.transition_dense()
        emis = params.emission_dense()
        out = np.empty((len(dataset), H))
        by_len = {}
        for i, rec in enumerate(dataset):
            by_len.setdefault(len(rec.context), []).append(i)
        for L, idxs in by_len.items():
            if L == 0:
                # no context: the chain has not started, use the initial
                # distribution one virtual step back
                for i in idxs:
                    out[i] = params.initial
                continue
            ctxs = np.array([list(dataset[i].context) for i in idxs], dtype=np.int64)
            post, _ = kernels.filter_batch(ctxs, params.initial, trans, emis)
            out[idxs] = post
        return out

    def score_batch(self, dataset):
        params = self.params
        trans = params.transition_dense()
        emis = params.emission_dense()
        priors = self.priors(dataset)
        ll = np.zeros(len(dataset))
        floored = np.zeros(len(dataset), dtype=np.int64)
        has_ctx = np.array([len(rec.context) > 0 for rec in dataset])
        for L, idxs in _group_by_continuation_length(dataset).items():
            toks = np.array([list(dataset[i].continuation) for i in idxs], dtype=np.int64)
            sub = priors[idxs]
            if not has_ctx[idxs].all():
                # empty-context records seed their first step from the
                # initial distribution instead of a propagated belief
                ll_i, fl_i = _score_continuations_seed_initial(
                    sub, has_ctx[idxs], toks, params, trans, emis
                )
            else:
                ll_i, fl_i = _score_continuations(sub, toks, trans, emis)
            ll[idxs] = ll_i
            floored[idxs] = fl_i
        return ll, floored


def _score_continuations_seed_initial(priors, has_ctx, toks, params, trans, emis):
    """Mixed batch where some records have empty contexts: those seed the
    first step from the initial distribution directly."""
    N, L = toks.shape
    H = trans.shape[0]
    ll = np.zeros(N)
    floored = np.zeros(N, dtype=np.int64)
    belief = priors.copy()
    for i in range(L):
        if i == 0:
            u = np.where(has_ctx[:, None], belief @ trans, belief)
        else:
            u = belief @ trans
        w = u * emis[:, toks[:, i]].T
        mass = w.sum(axis=1)
        ok = mass > 0.0
        with np.errstate(divide="ignore"):
            ll += np.where(ok, np.log(np.maximum(mass, 1e-300)), LOG_FLOOR)
        floored += (~ok).astype(np.int64)
        belief = np.where(ok[:, None], w / np.maximum(mass, 1e-300)[:, None], 1.0 / H)
    return ll, floored


class HybridSurrogate:
    """Neural-encoded surrogate: the prior comes from the trained head
    applied to the stored context features."""

    def __init__(self, params: HmmParams, head: EncoderHead):
        self.params = params
        self.head = head

    def score_batch(self, dataset):
        params = self.params
        trans = params.transition_dense()
        emis = params.emission_dense()
        ll = np.zeros(len(dataset))
        floored = np.zeros(len(dataset), dtype=np.int64)
        for L, idxs in _group_by_continuation_length(dataset).items():
            toks = np.array([list(dataset[i].continuation) for i in idxs], dtype=np.int64)
            priors = np.stack([encode_prior(self.head, dataset[i].features).probs for i in idxs])
            ll_i, fl_i = _score_continuations(priors, toks, trans, emis)
            ll[idxs] = ll_i
            floored[idxs] = fl_i
        return ll, floored


class ExactLmSurrogate:
    """Scores with the base LM itself (floor for reference comparisons)."""

    def __init__(self, lm: BaseLm):
        self.lm = lm

    def score_batch(self, dataset):
        ll = np.zeros(len(dataset))
        floored = np.zeros(len(dataset), dtype=np.int64)
        for i, rec in enumerate(dataset):
            state = self.lm.state_after(rec.context)
            total = 0.0
            for x in rec.continuation:
                p = float(self.lm.next_dist(state)[x])
                if p <= 0.0:
                    total += LOG_FLOOR
                    floored[i] += 1
                else:
                    total += np.log(p)
                state = self.lm.advance(state, x)
            ll[i] = total
        return ll, floored


@dataclass
class EvalRow:
    model: str
    perplexity: float
    bucket_perplexity: dict
    floored_tokens: int
    total_tokens: int


@dataclass
class EvalReport:
    rows: list
    buckets: tuple = BUCKETS

    def format_table(self) -> str:
        headers = ["model", "ppl"] + [f"len {a}-{b}" for a, b in self.buckets] + ["floored"]
        lines = ["  ".join(f"{h:>10}" for h in headers)]
        for row in self.rows:
            cells = [f"{row.model:>10}", f"{row.perplexity:10.4f}"]
            for bucket in self.buckets:
                v = row.bucket_perplexity.get(bucket)
                cells.append(f"{v:10.4f}" if v is not None else f"{'-':>10}")
            cells.append(f"{row.floored_tokens:>10d}")
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def to_csv(self) -> str:
        headers = ["model", "perplexity"] + [f"ppl_len_{a}_{b}" for a, b in self.buckets]
        headers += ["floored_tokens", "total_tokens"]
        lines = [",".join(headers)]
        for row in self.rows:
            cells = [row.model, f"{row.perplexity:.10g}"]
            for bucket in self.buckets:
                v = row.bucket_perplexity.get(bucket)
                cells.append("" if v is None else f"{v:.10g}")
            cells += [str(row.floored_tokens), str(row.total_tokens)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_perplexity(models, dataset) -> EvalReport:
    """models: list of (name, scorer) pairs; every scorer sees the identical
    records. Perplexity is exp(-mean continuation loglik per token)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    lengths = np.array([len(rec.continuation) for rec in dataset])
    rows = []
    for name, scorer in models:
        ll, floored = scorer.score_batch(dataset)
        overall = float(np.exp(-ll.sum() / lengths.sum()))
        bucket_ppl = {}
        for a, b in BUCKETS:
            mask = (lengths >= a) & (lengths <= b)
            if mask.any():
                bucket_ppl[(a, b)] = float(np.exp(-ll[mask].sum() / lengths[mask].sum()))
        rows.append(
            EvalRow(
                model=name,
                perplexity=overall,
                bucket_perplexity=bucket_ppl,
                floored_tokens=int(floored.sum()),
                total_tokens=int(lengths.sum()),
            )
        )
    return EvalReport(rows=rows)
