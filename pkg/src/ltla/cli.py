"""Command-line surface: data sampling, training, querying, generation,
evaluation, benchmarking, and the enumeration oracles.

Exit codes: 0 success, 2 usage error, 3 constraint not met, 4 numerical
abort. Global flags (--seed, --threads, --config) are accepted before or
after the subcommand; --config points at a JSON file of flag defaults that
explicit flags override.
"""

import argparse
import json
import sys
import time

import numpy as np

from . import base_lm as blm
from . import decode as dec
from . import distill as dst
from . import dfa as dfa_mod
from . import encoder as enc
from . import hmm as hmm_mod
from . import kernels, lookahead, monarch, oracle, pool, seeds
from .errors import (
    ImpossibleObservation,
    LtlaError,
    SizeGuardExceeded,
    StateCapExceeded,
    TrainingDiverged,
    UnsatisfiableAtStep,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONSTRAINT = 3
EXIT_NUMERICAL = 4


def _load_constraint(args, vocab):
    """Build the QuerySpec selected by the constraint flags."""
    chosen = [
        name
        for name, val in [
            ("--constraint", args.constraint),
            ("--token-at", args.token_at),
            ("--eos-within", args.eos_within),
            ("--classifier", getattr(args, "classifier", None)),
        ]
        if val is not None
    ]
    if len(chosen) != 1:
        raise ValueError(f"exactly one constraint flag is required, got {chosen or 'none'}")
    if args.constraint is not None:
        with open(args.constraint) as f:
            spec = dfa_mod.parse_keyword_text(f.read(), vocab)
        return lookahead.QuerySpec(kind="dfa_accept", dfa=dfa_mod.build_keyword_dfa(spec, vocab))
    if args.token_at is not None:
        k, v = args.token_at.split()
        return lookahead.QuerySpec(kind="token_at_offset", offset=int(k), token=int(v))
    if args.eos_within is not None:
        return lookahead.QuerySpec(kind="eos_within", offset=args.eos_within)
    with open(args.classifier) as f:
        clf = lookahead.classifier_from_json(json.load(f))
    return lookahead.QuerySpec(kind="classifier_attr", classifier=clf)


def _cmd_sample_data(args):
    lm = blm.load_lm(args.lm)
    ds = dst.sample_dataset(lm, args.n, args.t, args.seed)
    dst.save_dataset(ds, args.out)
    print(json.dumps({"records": len(ds), "T": args.t, "out": args.out}))
    return EXIT_OK


def _cmd_train_hmm(args):
    ds = dst.load_dataset(args.data)
    seqs = [list(r.context) + list(r.continuation) for r in ds]
    vocab = hmm_mod.Vocabulary(size=args.vocab_size or (max(max(s) for s in seqs) + 1))
    params, history = dst.em_train_hmm(
        seqs,
        hidden_size=args.hidden_size,
        vocab=vocab,
        init_seed=seeds.substream(args.seed, "init"),
        iters=args.iters,
        kind=args.kind,
        block_size=args.block_size,
    )
    hmm_mod.save(params, args.out)
    if args.history:
        with open(args.history, "w") as f:
            f.write("iter,loglik\n")
            for i, ll in enumerate(history):
                f.write(f"{i},{ll:.10g}\n")
    print(json.dumps({"final_loglik": history[-1], "iters": args.iters, "out": args.out}))
    return EXIT_OK


def _cmd_train_encoder(args):
    ds = dst.load_dataset(args.data)
    params = hmm_mod.load(args.model)
    feature_dim = ds[0].features.shape[0]
    init_rng = seeds.substream(args.seed, "init")
    if args.variant == "linear":
        head = enc.linear_head(feature_dim, params.hidden_size)
    else:
        head = enc.mlp_head(feature_dim, params.hidden_size, init_rng, width=args.mlp_width)
    cfg = enc.default_train_config(
        args.variant,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        **({"learning_rate": args.lr} if args.lr is not None else {}),
    )
    pairs = [(r.features, r.continuation) for r in ds]
    head, curve = enc.train_encoder(head, pairs, params, cfg)
    enc.save(head, args.out)
    if args.loss_curve:
        with open(args.loss_curve, "w") as f:
            f.write("step,mean_nll\n")
            for i, nll in enumerate(curve):
                f.write(f"{i},{nll:.10g}\n")
    print(json.dumps({"final_nll": curve[-1], "steps": len(curve), "out": args.out}))
    return EXIT_OK


def _belief_for_context(args, params, context):
    if not context:
        return None
    if args.encoder:
        if not args.lm:
            raise ValueError("--encoder requires --lm to featurize the context")
        head = enc.load(args.encoder)
        lm = blm.load_lm(args.lm)
        return enc.encode_prior(head, lm.featurize(lm.state_after(context)))
    return hmm_mod.filter_prefix(context, params)


def _cmd_query(args):
    params = hmm_mod.load(args.model)
    context = params.vocab.tokenize(args.context) if args.context else []
    spec = _load_constraint(args, params.vocab)
    horizon = args.horizon or params.max_len
    table = lookahead.build_table(params, spec, horizon, cache_dir=args.table_cache)
    belief = _belief_for_context(args, params, context)
    prob = lookahead.query_prob(spec, params, context, horizon, belief=belief, table=table)
    print(json.dumps({"prob": prob, "context_len": len(context), "horizon": horizon}))
    return EXIT_OK


def _cmd_generate(args):
    params = hmm_mod.load(args.model)
    vocab = params.vocab
    spec = _load_constraint(args, vocab)
    if spec.kind != "dfa_accept":
        raise ValueError("generation currently supports keyword automaton constraints")
    d = spec.dfa
    if args.lm_stream:
        with open(args.lm_stream) as f:
            lm = blm.StreamLm.from_lines(f, vocab)
    elif args.lm:
        lm = blm.load_lm(args.lm)
    else:
        lm = blm.HmmLm(params)  # self-guided: surrogate doubles as base model
    head = enc.load(args.encoder) if args.encoder else None
    tbl = lookahead.build_table(params, spec, args.max_len, cache_dir=args.table_cache)
    cfg = dec.GenConfig(
        mode=args.mode, beams=args.beams, max_len=args.max_len, temperature=args.temperature
    )
    out = sys.stdout if args.out is None else open(args.out, "w")

    def emit(tokens, lm_ll, guided_ll, accepted):
        doc = {
            "tokens": list(tokens),
            "text": " ".join(vocab.token_names[t] for t in tokens),
            "lm_loglik": lm_ll,
            "guided_loglik": guided_ll,
            "accepted": accepted,
        }
        out.write(json.dumps(doc) + "\n")

    try:
        if args.mode == "beam":
            result = dec.beam_generate(lm, params, d, tbl, cfg, head=head)
            if not result.constraint_met:
                if result.best_partial is not None:
                    h = result.best_partial
                    emit(h.tokens, h.lm_loglik, h.guided_loglik, h.accepted)
                return EXIT_CONSTRAINT
            h = result.hypotheses[0]
            emit(h.tokens, h.lm_loglik, h.guided_loglik, h.accepted)
        else:
            def one(i):
                rng = seeds.substream_indexed(args.seed, "decode", i)
                return dec.sample_generate(lm, params, d, tbl, cfg, rng, head=head)

            for tokens, diag in pool.map_ordered(one, range(args.num_samples)):
                emit(tokens, diag["lm_loglik"], diag["guided_loglik"], diag["accepted"])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cmd_eval(args):
    ds = dst.load_dataset(args.data)
    models = []
    for spec in args.surrogate:
        name, _, paths = spec.partition("=")
        if not paths:
            raise ValueError(f"surrogate spec {spec!r} must look like name=model.json[+enc.json]")
        model_path, _, enc_path = paths.partition("+")
        params = hmm_mod.load(model_path)
        if enc_path:
            models.append((name, dst.HybridSurrogate(params, enc.load(enc_path))))
        else:
            models.append((name, dst.HmmSurrogate(params)))
    if args.with_lm:
        models.append(("base_lm", dst.ExactLmSurrogate(blm.load_lm(args.with_lm))))
    report = dst.evaluate_perplexity(models, ds)
    print(report.format_table())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    return EXIT_OK


def _cmd_bench(args):
    rng = seeds.substream(args.seed, "bench")
    if args.what == "decode":
        report = _bench_decode_setup(args, rng)
    elif args.what == "kernels":
        report = _bench_kernels(args, rng)
    else:
        report = _bench_monarch(args, rng)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _random_dense_params(rng, H, V, max_len):
    def rows(r, c):
        raw = rng.uniform(0.2, 1.0, size=(r, c))
        return raw / raw.sum(axis=1, keepdims=True)

    return hmm_mod.HmmParams(
        hidden_size=H,
        vocab=hmm_mod.Vocabulary(size=V),
        initial=rows(1, H)[0],
        transition=rows(H, H),
        emission=rows(H, V),
        max_len=max_len,
    )


def _bench_decode_setup(args, rng):
    params = _random_dense_params(rng, args.hidden_size, args.vocab_size, args.horizon)
    kw = dfa_mod.KeywordSpec(keywords=((1, 2), (3,)))
    d = dfa_mod.build_keyword_dfa(kw, params.vocab)
    return dec.bench_decode(
        params, d, horizon=args.horizon, num_prefixes=args.num_prefixes, seed=args.seed
    )


def _time_call(fn, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _bench_kernels(args, rng):
    """Numba vs pure-numpy timing for every dual-path kernel."""
    H, V, S, N, T = 64, 64, 16, 256, 32
    trans = rng.dirichlet(np.ones(H), size=H)
    emis = rng.dirichlet(np.ones(V), size=H)
    init = rng.dirichlet(np.ones(H))
    table_next = rng.uniform(size=(H, S))
    delta = rng.integers(0, S, size=(S, V))
    seqs = rng.integers(0, V, size=(N, T))
    b = int(np.sqrt(H))
    mm = monarch.random_monarch(H, H, b, rng)
    x = rng.uniform(size=H)
    cases = {
        "dfa_table_sweep": lambda impl: impl(table_next, trans, emis, delta),
        "filter_batch": lambda impl: impl(seqs, init, trans, emis),
        "em_accumulate": lambda impl: impl(seqs, init, trans, emis),
        "backward_batch": lambda impl: impl(seqs, trans, emis),
        "monarch_matvec": lambda impl: impl(
            mm.left_blocks, mm.perm, mm.right_blocks, mm.row_scale, x
        ),
    }
    report = {"active_backend": kernels.backend(), "reps": args.reps, "kernels": {}}
    for name, call in cases.items():
        impls = kernels.IMPLEMENTATIONS[name]
        entry = {}
        for kind in ("numpy", "numba"):
            impl = impls.get(kind)
            if impl is None:
                continue
            call(impl)  # warm-up / jit compile
            entry[f"{kind}_sec"] = _time_call(lambda: call(impl), args.reps)
        if "numpy_sec" in entry and "numba_sec" in entry:
            entry["numba_speedup"] = entry["numpy_sec"] / entry["numba_sec"]
        report["kernels"][name] = entry
    return report


def _bench_monarch(args, rng):
    """Matvec wall time across hidden sizes; dense h^2 would scale 16x per
    4x size step, the structured form must stay well under that."""
    sizes = [int(s) for s in args.sizes.split(",")]
    out = {"sizes": sizes, "matvec_sec": {}, "ratios": {}}
    times = {}
    for h in sizes:
        b = int(np.sqrt(h))
        if b * b != h:
            raise ValueError(f"size {h} is not a perfect square")
        m = monarch.random_monarch(h, h, b, rng)
        x = rng.uniform(size=h)
        m.matvec(x)  # warm-up
        reps = max(args.reps, 3)
        times[h] = _time_call(lambda: [m.matvec(x) for _ in range(16)], reps) / 16
        out["matvec_sec"][str(h)] = times[h]
    for a, bsz in zip(sizes, sizes[1:]):
        out["ratios"][f"{bsz}/{a}"] = times[bsz] / times[a]
    return out


def _cmd_oracle(args):
    params = hmm_mod.load(args.model)
    if args.oracle_what == "event-prob":
        context = params.vocab.tokenize(args.context) if args.context else []
        spec = _load_constraint(args, params.vocab)
        constraint = spec if spec.kind != "dfa_accept" else spec.dfa
        prob = oracle.enumerate_event_prob(params, context, constraint, args.horizon)
        print(json.dumps({"prob": prob}))
    elif args.oracle_what == "mi":
        mi = oracle.enumerate_mutual_information(params, args.split, args.length)
        bound = float(np.log(params.hidden_size))
        print(json.dumps({"mutual_information": mi, "log_hidden_size": bound}))
    else:
        context = params.vocab.tokenize(args.context) if args.context else []
        dist = oracle.enumerate_continuation_dist(params, context, args.horizon)
        top = np.argsort(dist)[::-1][: args.top]
        rows = []
        for idx in top:
            toks = []
            rem = int(idx)
            for _ in range(args.horizon):
                toks.append(rem % params.vocab.size)
                rem //= params.vocab.size
            rows.append({"continuation": toks[::-1], "prob": float(dist[idx])})
        print(json.dumps({"total": float(dist.sum()), "top": rows}))
    return EXIT_OK


def _add_constraint_flags(p, classifier=True):
    p.add_argument("--constraint", help="keyword file: one keyword per line")
    p.add_argument("--token-at", help="'K V': token V exactly K steps ahead")
    p.add_argument("--eos-within", type=int, help="end token within K steps")
    if classifier:
        p.add_argument("--classifier", help="factorized classifier JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltla", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--config", help="JSON file of flag defaults")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-data", parents=[common], help="sample context/continuation records")
    p.add_argument("--lm", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample_data)

    p = sub.add_parser("train-hmm", parents=[common], help="Baum-Welch surrogate training")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden-size", type=int, required=True)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--kind", choices=["dense", "monarch"], default="dense")
    p.add_argument("--block-size", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="CSV of per-iteration loglik")
    p.set_defaults(func=_cmd_train_hmm)

    p = sub.add_parser("train-encoder", parents=[common], help="train the latent-prior head")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--variant", choices=["linear", "mlp"], default="linear")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float)
    p.add_argument("--mlp-width", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-curve", help="CSV of (step, mean_nll)")
    p.set_defaults(func=_cmd_train_encoder)

    p = sub.add_parser("query", parents=[common], help="conditional probability of an event")
    p.add_argument("--model", required=True)
    p.add_argument("--encoder")
    p.add_argument("--lm", help="base model for featurizing (with --encoder)")
    p.add_argument("--context", default="")
    p.add_argument("--horizon", type=int)
    p.add_argument("--table-cache")
    _add_constraint_flags(p)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("generate", parents=[common], help="constrained generation")
    p.add_argument("--model", required=True)
    p.add_argument("--lm")
    p.add_argument("--lm-stream", help="line-delimited dist/features records")
    p.add_argument("--encoder")
    p.add_argument("--mode", choices=["sample", "beam"], default="sample")
    p.add_argument("--beams", type=int, default=16)
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--table-cache")
    p.add_argument("--out")
    _add_constraint_flags(p, classifier=False)
    p.set_defaults(func=_cmd_generate, classifier=None)

    p = sub.add_parser("eval", parents=[common], help="stratified perplexity report")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--surrogate",
        action="append",
        required=True,
        help="name=model.json or name=model.json+encoder.json (repeatable)",
    )
    p.add_argument("--with-lm", help="also score with this exact base model")
    p.add_argument("--csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="timing harnesses")
    p.add_argument("--what", choices=["decode", "kernels", "monarch"], default="decode")
    p.add_argument("--hidden-size", type=int, default=128)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--num-prefixes", type=int, default=100)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--sizes", default="256,1024,4096")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("oracle", parents=[common], help="brute-force enumeration checks")
    osub = p.add_subparsers(dest="oracle_what", required=True)
    o = osub.add_parser("event-prob", parents=[common])
    o.add_argument("--model", required=True)
    o.add_argument("--context", default="")
    o.add_argument("--horizon", type=int, required=True)
    _add_constraint_flags(o)
    o.set_defaults(func=_cmd_oracle)
    o = osub.add_parser("mi", parents=[common])
    o.add_argument("--model", required=True)
    o.add_argument("--split", type=int, required=True)
    o.add_argument("--length", type=int, required=True)
    o.set_defaults(func=_cmd_oracle)
    o = osub.add_parser("cont-dist", parents=[common])
    o.add_argument("--model", required=True)
    o.add_argument("--context", default="")
    o.add_argument("--horizon", type=int, required=True)
    o.add_argument("--top", type=int, default=10)
    o.set_defaults(func=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        with open(known.config) as f:
            cfg = json.load(f)
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    pool.set_threads(args.threads)
    try:
        return args.func(args)
    except UnsatisfiableAtStep as e:
        print(f"ltla: constraint not satisfiable: {e}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (TrainingDiverged, ImpossibleObservation, FloatingPointError) as e:
        print(f"ltla: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, StateCapExceeded, SizeGuardExceeded, LtlaError) as e:
        print(f"ltla: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
