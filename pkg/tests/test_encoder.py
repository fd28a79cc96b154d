import json

import numpy as np
import pytest

from ltla import encoder as enc
from ltla import hmm

from conftest import make_params, random_params


def fd_gradient(head, batch, params, eps=1e-5):
    """Central finite differences on the mean conditional loglik."""

    def value(h):
        return float(
            np.mean([enc.hybrid_loglik(h, f, c, params) for f, c in batch])
        )

    grads = {}
    names = ["W1", "b1"] + (["W2", "b2"] if head.variant == "mlp" else [])
    for name in names:
        arr = getattr(head, name)
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = value(head)
            arr[idx] = orig - eps
            down = value(head)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        grads[name] = g
    return grads


class TestEncodePrior:
    def test_zero_weights_give_uniform(self):
        head = enc.linear_head(4, 3)
        out = enc.encode_prior(head, np.array([1.0, 0.0, 2.0, -1.0]))
        assert np.abs(out.probs - 1.0 / 3).max() < 1e-12
        assert out.log_norm == 0.0

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(0)
        head = enc.linear_head(3, 4, rng=rng, scale=0.5)
        feats = rng.normal(size=3)
        base = enc.encode_prior(head, feats).probs
        shifted = enc.EncoderHead(variant="linear", W1=head.W1, b1=head.b1 + 3.7)
        assert np.abs(enc.encode_prior(shifted, feats).probs - base).max() < 1e-12

    def test_strict_positivity(self):
        rng = np.random.default_rng(1)
        head = enc.mlp_head(5, 4, rng)
        out = enc.encode_prior(head, rng.normal(size=5))
        assert out.probs.min() > 0.0

    def test_dimension_mismatch(self):
        head = enc.linear_head(4, 2)
        with pytest.raises(ValueError):
            enc.encode_prior(head, np.zeros(3))


class TestHybridLoglik:
    def test_engineered_head_reduces_to_filtering(self, canonical_params):
        """A head whose logits reproduce log filter posteriors per context
        makes the hybrid likelihood equal the standard conditional."""
        contexts = [(0,), (1,), (0, 1), (1, 0)]
        H = canonical_params.hidden_size
        W1 = np.zeros((len(contexts), H))
        for i, ctx in enumerate(contexts):
            W1[i] = np.log(hmm.filter_prefix(list(ctx), canonical_params).probs)
        head = enc.EncoderHead(variant="linear", W1=W1, b1=np.zeros(H))
        for i, ctx in enumerate(contexts):
            feats = np.zeros(len(contexts))
            feats[i] = 1.0
            for cont in ([0], [1, 1], [0, 1, 0]):
                hybrid = enc.hybrid_loglik(head, feats, cont, canonical_params)
                standard = hmm.continuation_loglik(
                    hmm.filter_prefix(list(ctx), canonical_params), cont, canonical_params
                )
                assert abs(hybrid - standard) < 1e-9

    def test_uniform_head_two_term_sum(self, canonical_params):
        head = enc.linear_head(3, 2)
        got = enc.hybrid_loglik(head, np.zeros(3), [0], canonical_params)
        assert abs(got - np.log(0.5 * 0.74 + 0.5 * 0.26)) < 1e-12
        assert abs(got - np.log(0.5)) < 1e-12


class TestEncoderGrad:
    def test_constant_beta_gives_zero_gradient(self):
        params = make_params([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.3, 0.7], [0.3, 0.7]])
        rng = np.random.default_rng(2)
        head = enc.linear_head(3, 2, rng=rng, scale=0.3)
        batch = [(rng.normal(size=3), [0, 1]) for _ in range(4)]
        grad, _ = enc.encoder_grad(head, batch, params)
        assert np.abs(grad.W1).max() < 1e-12
        assert np.abs(grad.b1).max() < 1e-12

    @pytest.mark.parametrize("variant", ["linear", "mlp"])
    def test_finite_difference_agreement(self, variant):
        rng = np.random.default_rng(3)
        for _ in range(6):
            params = random_params(rng, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
            F = int(rng.integers(2, 5))
            if variant == "linear":
                head = enc.linear_head(F, params.hidden_size, rng=rng, scale=0.4)
            else:
                head = enc.mlp_head(F, params.hidden_size, rng, width=5)
            batch = [
                (
                    rng.normal(size=F),
                    [int(x) for x in rng.integers(0, params.vocab.size, size=int(rng.integers(1, 4)))],
                )
                for _ in range(3)
            ]
            grad, _ = enc.encoder_grad(head, batch, params)
            fd = fd_gradient(head, batch, params)
            for name, g in fd.items():
                a = getattr(grad, name)
                rel = np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), 1e-6)
                assert rel.max() < 1e-4

    def test_gradient_invariant_to_beta_scale(self, canonical_params):
        rng = np.random.default_rng(4)
        head = enc.linear_head(2, 2, rng=rng, scale=0.5)
        feats = np.stack([rng.normal(size=2)])
        betas = np.array([[0.2, 0.6]])
        g1, _ = enc._grad_from_betas(head, feats, betas, np.zeros(1))
        g2, _ = enc._grad_from_betas(head, feats, betas * 37.0, np.zeros(1))
        assert np.abs(g1.W1 - g2.W1).max() < 1e-12


class TestTraining:
    def _toy_setup(self, seed=0):
        rng = np.random.default_rng(seed)
        params = random_params(rng, 3, 3)
        data = []
        for _ in range(40):
            feats = rng.normal(size=4)
            cont = [int(x) for x in rng.integers(0, 3, size=int(rng.integers(1, 4)))]
            data.append((feats, cont))
        return params, data

    def test_zero_steps_returns_initial_head(self):
        params, data = self._toy_setup()
        head = enc.linear_head(4, 3)
        cfg = enc.TrainConfig(steps=0, seed=0)
        out, curve = enc.train_encoder(head, data, params, cfg)
        assert curve == []
        assert np.array_equal(out.W1, head.W1)
        assert np.array_equal(out.b1, head.b1)

    def test_training_reduces_loss_on_planted_data(self):
        from ltla import base_lm as blm
        from ltla import distill as dst

        lm = blm.planted_lm(V=2, favor=0.9)
        ds = dst.sample_dataset(lm, 400, 8, seed=5)
        seqs = [list(r.context) + list(r.continuation) for r in ds]
        params, _ = dst.em_train_hmm(seqs, 2, lm.vocab, init_seed=1, iters=10)
        pairs = [(r.features, r.continuation) for r in ds]
        head = enc.linear_head(lm.feature_dim, 2)
        cfg = enc.TrainConfig(steps=300, batch_size=32, seed=0)
        trained, curve = enc.train_encoder(head, pairs, params, cfg)
        assert np.mean(curve[-20:]) < curve[0]

    def test_loss_curve_reproducible_bit_for_bit(self):
        params, data = self._toy_setup(7)
        rng = np.random.default_rng(8)
        head = enc.mlp_head(4, 3, rng, width=6)
        cfg = enc.TrainConfig(steps=50, batch_size=8, seed=3)
        _, c1 = enc.train_encoder(head, data, params, cfg)
        _, c2 = enc.train_encoder(head, data, params, cfg)
        assert c1 == c2

    def test_divergence_aborts_with_diagnostic(self):
        params, data = self._toy_setup(9)
        head = enc.linear_head(4, 3)
        head.W1[0, 0] = np.nan
        cfg = enc.TrainConfig(steps=5, seed=0)
        with pytest.raises(enc.TrainingDiverged):
            enc.train_encoder(head, data, params, cfg)


class TestSerialization:
    @pytest.mark.parametrize("variant", ["linear", "mlp"])
    def test_round_trip(self, variant):
        rng = np.random.default_rng(11)
        if variant == "linear":
            head = enc.linear_head(3, 2, rng=rng, scale=0.5)
        else:
            head = enc.mlp_head(3, 2, rng)
        back = enc.from_json_dict(json.loads(json.dumps(enc.to_json_dict(head))))
        feats = rng.normal(size=3)
        assert np.array_equal(
            enc.encode_prior(back, feats).probs, enc.encode_prior(head, feats).probs
        )
