import json

import numpy as np
import pytest

from ltla import base_lm as blm
from ltla import hmm
from ltla.hmm import Vocabulary


def iid_lm(row):
    row = np.asarray(row, dtype=np.float64)
    vocab = Vocabulary(size=row.shape[0])
    return blm.TabularLm(vocab, order=0, tables=[row[None, :]])


class TestNextDist:
    def test_order_zero_constant_row(self):
        lm = iid_lm([0.7, 0.3])
        state = lm.initial_state()
        for _ in range(4):
            assert np.array_equal(lm.next_dist(state), [0.7, 0.3])
            state = lm.advance(state, 0)

    def test_planted_switch_selects_row_by_first_token(self):
        lm = blm.planted_lm(V=2, favor=0.9)
        s0 = lm.state_after([0])
        s1 = lm.state_after([1, 0, 1])
        assert np.abs(lm.next_dist(s0) - [0.9, 0.1]).max() < 1e-12
        assert np.abs(lm.next_dist(s1) - [0.1, 0.9]).max() < 1e-12

    def test_rows_validate_at_load(self):
        with pytest.raises(ValueError):
            iid_lm([0.7, 0.4])


class TestSampling:
    def test_deterministic_lm_all_zeros(self):
        lm = iid_lm([1.0, 0.0])
        assert blm.lm_sample(lm, 5, 3) == [0, 0, 0, 0, 0]

    def test_seed_determinism(self):
        lm = blm.planted_lm(V=3, favor=0.8)
        assert blm.lm_sample(lm, 8, 42) == blm.lm_sample(lm, 8, 42)

    def test_bigram_counts_match_tables(self):
        lm = blm.planted_lm(V=2, favor=0.9)
        rng = np.random.default_rng(7)
        n = 50_000
        counts = np.zeros((2, 2))  # (first token, second token)
        for _ in range(n):
            seq = blm.lm_sample(lm, 2, rng)
            counts[seq[0], seq[1]] += 1
        for first in range(2):
            total = counts[first].sum()
            row = lm.next_dist(lm.state_after([first]))
            for v in range(2):
                p = row[v]
                se = np.sqrt(p * (1 - p) / total)
                assert abs(counts[first, v] / total - p) < 3 * se


class TestFeaturize:
    def test_empty_context_is_all_zeros(self):
        lm = blm.planted_lm(V=2)
        assert np.array_equal(lm.featurize(lm.initial_state()), np.zeros(4))

    def test_first_and_last_one_hots(self):
        lm = blm.planted_lm(V=2)
        feats = lm.featurize(lm.state_after([1, 0]))
        assert feats.tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_injective_on_first_and_last_k(self):
        lm = blm.planted_lm(V=3)
        seen = {}
        for ctx in ([0], [1], [0, 1], [1, 1], [2, 0, 1], [0, 2]):
            key = tuple(lm.featurize(lm.state_after(ctx)).tolist())
            sig = (ctx[0], tuple(ctx[-1:]))
            if key in seen:
                assert seen[key] == sig
            seen[key] = sig

    def test_padding_slots_before_start(self):
        vocab = Vocabulary(size=2)
        tables = [np.full((1, 2), 0.5), np.full((2, 2), 0.5), np.full((4, 2), 0.5)]
        lm = blm.TabularLm(vocab, order=2, tables=tables)
        feats = lm.featurize(lm.state_after([1]))
        # first-token slot, then an all-zero slot, then the last token
        assert feats.tolist() == [0.0, 1.0, 0.0, 0.0, 0.0, 1.0]


class TestHmmLm:
    def test_matches_predictive_distribution(self, canonical_params):
        lm = blm.HmmLm(canonical_params)
        state = lm.initial_state()
        assert np.abs(lm.next_dist(state) - [0.5, 0.5]).max() < 1e-12
        state = lm.advance(state, 0)
        # belief [0.8, 0.2] -> next-token mass on 0 is 0.644
        assert abs(lm.next_dist(state)[0] - 0.644) < 1e-12

    def test_stepwise_product_equals_joint(self, canonical_params):
        lm = blm.HmmLm(canonical_params)
        seq = [0, 1, 1, 0]
        state = lm.initial_state()
        logp = 0.0
        for x in seq:
            logp += np.log(lm.next_dist(state)[x])
            state = lm.advance(state, x)
        assert abs(logp - hmm.joint_loglik(seq, canonical_params)) < 1e-10


class TestStreamLm:
    def test_wire_format_round_trip(self):
        vocab = Vocabulary(size=3)
        lines = [
            json.dumps({"dist": [0.2, 0.3, 0.5], "features": [1.0, 0.0]}),
            json.dumps({"dist": [0.6, 0.2, 0.2], "features": [0.0, 1.0]}),
        ]
        lm = blm.StreamLm.from_lines(lines, vocab)
        state = lm.initial_state()
        assert np.array_equal(lm.next_dist(state), [0.2, 0.3, 0.5])
        assert np.array_equal(lm.featurize(state), [1.0, 0.0])
        state = lm.advance(state, 2)
        assert np.array_equal(lm.next_dist(state), [0.6, 0.2, 0.2])

    def test_invalid_dist_rejected(self):
        vocab = Vocabulary(size=2)
        with pytest.raises(ValueError):
            blm.StreamLm.from_lines([json.dumps({"dist": [0.9, 0.2], "features": []})], vocab)


class TestConformance:
    def test_check_lm_passes_for_tabular(self):
        lm = blm.planted_lm(V=3)
        blm.check_lm(lm, [[0], [1, 2], [2, 0, 1]])

    def test_check_lm_catches_bad_rows(self):
        lm = blm.planted_lm(V=2)
        lm.long_range_switch[0] = np.array([[0.9, 0.2], [0.5, 0.5]])
        with pytest.raises(ValueError):
            blm.check_lm(lm, [[0, 0]])


def test_tabular_json_round_trip():
    lm = blm.planted_regime_lm(V=4, unigram_strength=0.85, local_mix=0.25)
    back = blm.tabular_from_json(json.loads(json.dumps(blm.tabular_to_json(lm))))
    for ctx in ([], [0], [1, 2], [3, 0, 1]):
        s1, s2 = lm.state_after(ctx), back.state_after(ctx)
        assert np.array_equal(lm.next_dist(s1), back.next_dist(s2))
    assert blm.lm_hash(back) == blm.lm_hash(lm)
