import itertools

import numpy as np
import pytest

from ltla import dfa, hmm, lookahead as la, oracle

from conftest import make_params, random_dfa, random_params


def final_token_dfa(v, V):
    """Two states: have we just read v?"""
    delta = np.zeros((2, V), dtype=np.int64)
    delta[:, :] = 0
    delta[:, v] = 1
    return dfa.Dfa(num_states=2, num_tokens=V, start=0, accept=frozenset({1}), delta=delta)


class TestDfaTable:
    def test_base_case_layer_is_accept_indicator(self, canonical_params):
        rng = np.random.default_rng(0)
        d = random_dfa(rng, 4, 2)
        tbl = la.precompute_dfa_table(canonical_params, d, 3)
        expected = np.where(d.accept_mask(), 1.0, 0.0)
        assert np.array_equal(tbl.table[3], np.broadcast_to(expected, (2, 4)))

    def test_final_token_layer_matches_hand_recurrence(self, canonical_params):
        tbl = la.precompute_dfa_table(canonical_params, final_token_dfa(0, 2), 3)
        assert np.abs(tbl.table[2][:, 0] - [0.74, 0.26]).max() < 1e-12
        assert np.abs(tbl.table[2][:, 1] - [0.74, 0.26]).max() < 1e-12

    def test_accept_all_gives_all_ones(self, canonical_params):
        tbl = la.precompute_dfa_table(canonical_params, dfa.accept_all_dfa(2), 5)
        assert np.array_equal(tbl.table, np.ones_like(tbl.table))

    def test_horizon_guard(self, canonical_params):
        with pytest.raises(ValueError):
            la.precompute_dfa_table(canonical_params, dfa.accept_all_dfa(2), 99)

    def test_sparse_automaton_matches_dense(self, canonical_params, monkeypatch):
        dense = dfa.build_keyword_dfa(dfa.KeywordSpec(keywords=((0, 1),)), canonical_params.vocab)
        monkeypatch.setattr(dfa, "DENSE_CELL_CAP", 4)
        sparse = dfa.build_keyword_dfa(dfa.KeywordSpec(keywords=((0, 1),)), canonical_params.vocab)
        assert not sparse.is_dense
        t1 = la.precompute_dfa_table(canonical_params, dense, 4)
        t2 = la.precompute_dfa_table(canonical_params, sparse, 4)
        assert np.abs(t1.table - t2.table).max() < 1e-14

    def test_monarch_params_match_dense_equivalent(self):
        from ltla import monarch

        rng = np.random.default_rng(5)
        trans = monarch.random_monarch(4, 4, 2, rng)
        emis = monarch.random_monarch(4, 4, 2, rng)
        pi = rng.dirichlet(np.ones(4))
        mp = hmm.HmmParams(
            hidden_size=4, vocab=hmm.Vocabulary(size=4), initial=pi,
            transition=trans, emission=emis, max_len=8,
        )
        dp = make_params(pi, monarch.materialize(trans), monarch.materialize(emis))
        d = random_dfa(rng, 3, 4)
        t1 = la.precompute_dfa_table(mp, d, 4)
        t2 = la.precompute_dfa_table(dp, d, 4)
        assert np.abs(t1.table - t2.table).max() < 1e-12


class TestQueries:
    def test_hand_value(self, canonical_params):
        tbl = la.precompute_dfa_table(canonical_params, final_token_dfa(0, 2), 3)
        belief = hmm.Belief(np.array([0.8, 0.2]))
        assert abs(la.query_event_prob(belief, 0, tbl, 2) - 0.644) < 1e-12

    def test_accept_all_query_is_one(self, canonical_params):
        tbl = la.precompute_dfa_table(canonical_params, dfa.accept_all_dfa(2), 4)
        for probs in ([0.5, 0.5], [1.0, 0.0]):
            assert la.query_event_prob(hmm.Belief(np.array(probs)), 0, tbl, 2) == 1.0

    def test_enumeration_equivalence_random_instances(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(60):
            H, V, S = int(rng.integers(1, 5)), int(rng.integers(2, 4)), int(rng.integers(1, 5))
            params = random_params(rng, H, V)
            d = random_dfa(rng, S, V)
            tlen, hor = int(rng.integers(1, 4)), int(rng.integers(1, 6))
            ctx = [int(x) for x in rng.integers(0, V, size=tlen)]
            tbl = la.precompute_dfa_table(params, d, tlen + hor)
            fast = la.query_event_prob(
                hmm.filter_prefix(ctx, params), dfa.run(d, ctx), tbl, tlen
            )
            slow = oracle.enumerate_event_prob(params, ctx, d, hor)
            worst = max(worst, abs(fast - slow))
        assert worst < 1e-9

    def test_empty_context_via_initial_distribution(self, canonical_params):
        d = final_token_dfa(0, 2)
        tbl = la.precompute_dfa_table(canonical_params, d, 3)
        fast = la.initial_event_prob(canonical_params, d, tbl)
        slow = oracle.enumerate_event_prob(canonical_params, [], d, 3)
        assert abs(fast - slow) < 1e-12

    def test_monotonicity_for_nested_constraints(self, canonical_params):
        vocab = canonical_params.vocab
        narrow = dfa.build_keyword_dfa(dfa.KeywordSpec(keywords=((0, 1),)), vocab)
        wide = dfa.build_keyword_dfa(dfa.KeywordSpec(keywords=((0,),)), vocab)
        tn = la.precompute_dfa_table(canonical_params, narrow, 6)
        tw = la.precompute_dfa_table(canonical_params, wide, 6)
        rng = np.random.default_rng(9)
        for _ in range(20):
            ctx = [int(x) for x in rng.integers(0, 2, size=int(rng.integers(1, 4)))]
            belief = hmm.filter_prefix(ctx, canonical_params)
            pn = la.query_event_prob(belief, dfa.run(narrow, ctx), tn, len(ctx))
            pw = la.query_event_prob(belief, dfa.run(wide, ctx), tw, len(ctx))
            assert pn <= pw + 1e-9


class TestClassifier:
    def test_zero_weights_table_is_identity_factor(self, canonical_params):
        clf = la.FactorizedClassifier(weights=np.zeros(2), bias=0.7)
        tbl = la.precompute_classifier_table(canonical_params, clf, 5)
        assert np.abs(tbl.table).max() < 1e-12  # log expected factor 1
        belief = hmm.Belief(np.array([0.3, 0.7]))
        got = la.classifier_attribute_prob(clf, [0, 1], belief, tbl, canonical_params)
        assert abs(got - 1.0 / (1.0 + np.exp(-0.7))) < 1e-12

    def test_single_step_expected_factor(self):
        params = make_params([1.0], [[1.0]], [[0.5, 0.5]], max_len=8)
        clf = la.FactorizedClassifier(weights=np.array([np.log(2.0), 0.0]))
        tbl = la.precompute_classifier_table(params, clf, 1)
        assert abs(np.exp(tbl.table[0][0, 0]) - 1.5) < 1e-12

    def test_pipeline_matches_enumeration(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(40):
            H, V = int(rng.integers(1, 4)), int(rng.integers(2, 4))
            params = random_params(rng, H, V)
            clf = la.FactorizedClassifier(
                weights=rng.normal(0, 1, size=V), bias=float(rng.normal())
            )
            tlen, hor = int(rng.integers(1, 3)), int(rng.integers(1, 5))
            ctx = [int(x) for x in rng.integers(0, V, size=tlen)]
            tbl = la.precompute_classifier_table(params, clf, tlen + hor)
            fast = la.classifier_attribute_prob(
                clf, ctx, hmm.filter_prefix(ctx, params), tbl, params
            )
            spec = la.QuerySpec(kind="classifier_attr", classifier=clf)
            slow = oracle.enumerate_event_prob(params, ctx, spec, hor)
            worst = max(worst, abs(fast - slow))
        assert worst < 1e-9

    def test_large_weights_stay_finite(self, canonical_params):
        clf = la.FactorizedClassifier(weights=np.array([25.0, -25.0]))
        tbl = la.precompute_classifier_table(canonical_params, clf, 16)
        assert np.isfinite(tbl.table).all()


class TestPositional:
    def test_hand_value(self, canonical_params):
        belief = hmm.Belief(np.array([0.8, 0.2]))
        assert abs(la.query_positional(belief, canonical_params, 1, 0) - 0.644) < 1e-12

    def test_identity_transition_deterministic_emissions(self):
        params = make_params([0.5, 0.5], np.eye(2), [[1.0, 0.0], [0.0, 1.0]])
        belief = hmm.Belief(np.array([0.3, 0.7]))
        for k in range(1, 4):
            assert abs(la.query_positional(belief, params, k, 0) - 0.3) < 1e-12

    def test_normalization_over_tokens(self, canonical_params):
        rng = np.random.default_rng(13)
        belief = hmm.Belief(rng.dirichlet([1, 1]))
        for k in range(1, 6):
            total = sum(la.query_positional(belief, canonical_params, k, v) for v in range(2))
            assert abs(total - 1.0) < 1e-12

    def test_agrees_with_enumeration(self, canonical_params):
        ctx = [0, 1]
        belief = hmm.filter_prefix(ctx, canonical_params)
        for k in (1, 2, 3):
            spec = la.QuerySpec(kind="token_at_offset", offset=k, token=0)
            slow = oracle.enumerate_event_prob(canonical_params, ctx, spec, k)
            assert abs(la.query_positional(belief, canonical_params, k, 0) - slow) < 1e-12


class TestEosWithin:
    def test_dfa_shape_and_language(self):
        d = la.eos_within_dfa(2, eos_id=1, num_tokens=3)
        assert d.num_states == 4
        for seq in itertools.product(range(3), repeat=3):
            assert dfa.accepts(d, seq) == (1 in seq[:2])

    def test_query_matches_enumeration(self):
        rng = np.random.default_rng(15)
        params = hmm.HmmParams(
            hidden_size=2,
            vocab=hmm.Vocabulary(size=3, eos_id=2),
            initial=np.array([0.6, 0.4]),
            transition=np.array([[0.7, 0.3], [0.2, 0.8]]),
            emission=np.array([[0.5, 0.3, 0.2], [0.1, 0.2, 0.7]]),
            max_len=12,
        )
        for k in (1, 2, 3):
            ctx = [int(x) for x in rng.integers(0, 3, size=2)]
            hor = k + 2
            spec = la.QuerySpec(kind="eos_within", offset=k)
            tbl = la.build_table(params, spec, hor)
            fast = la.query_prob(spec, params, ctx, hor, table=tbl)
            slow = oracle.enumerate_event_prob(params, ctx, spec, hor)
            assert abs(fast - slow) < 1e-9


class TestTableLifecycle:
    def test_one_build_per_constraint_and_shared_across_contexts(self, canonical_params):
        la.reset_build_counts()
        d = final_token_dfa(0, 2)
        tbl = la.precompute_dfa_table(canonical_params, d, 5)
        for ctx in ([0], [1, 1], [0, 1, 0]):
            belief = hmm.filter_prefix(ctx, canonical_params)
            la.query_event_prob(belief, dfa.run(d, ctx), tbl, len(ctx))
        assert la.BUILD_COUNTS[tbl.constraint_id] == 1

    def test_binary_round_trip(self, canonical_params, tmp_path):
        tbl = la.precompute_dfa_table(canonical_params, final_token_dfa(1, 2), 4)
        path = tmp_path / "t.tbl"
        la.save_table(tbl, path)
        back = la.load_table(path)
        assert back.horizon == tbl.horizon
        assert back.constraint_id == tbl.constraint_id
        assert back.log_domain == tbl.log_domain
        assert np.array_equal(back.table, tbl.table)

    def test_disk_cache_avoids_rebuild(self, canonical_params, tmp_path):
        la.reset_build_counts()
        spec = la.QuerySpec(kind="dfa_accept", dfa=final_token_dfa(0, 2))
        t1 = la.build_table(canonical_params, spec, 4, cache_dir=str(tmp_path))
        t2 = la.build_table(canonical_params, spec, 4, cache_dir=str(tmp_path))
        assert la.BUILD_COUNTS[t1.constraint_id] == 1
        assert np.array_equal(t1.table, t2.table)

    def test_classifier_table_rejects_probability_query(self, canonical_params):
        clf = la.FactorizedClassifier(weights=np.zeros(2))
        tbl = la.precompute_classifier_table(canonical_params, clf, 3)
        with pytest.raises(ValueError):
            la.query_event_prob(hmm.Belief(np.array([0.5, 0.5])), 0, tbl, 1)
