import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oogen import autodiff as ad
from oogen.graph import Vocabulary
from oogen.model import (
    SIGMA_FLOOR, EmbeddedTask, ModelConfig, ModelParams, apply_dropout, build_support_index, effective_weight,
    embed_task, inductive_embed, param_shapes, sample_embedding, score, stochastic_score, transductive_embed,
)
from oogen.episode import Task


def make_params(score_kind="distmult", dim=2, n_bases=1, n_entities=6, n_raw=2, seed=0, seen=None, dropout=0.3):
    cfg = ModelConfig(n_entities, 2 * n_raw, n_raw, dim=dim, n_bases=n_bases, score=score_kind, dropout=dropout)
    return ModelParams.initialize(cfg, np.random.default_rng(seed), seen)


def vocab_for(n_entities=6, n_raw=2):
    return Vocabulary(tuple(f"e{i}" for i in range(n_entities)), tuple(f"r{i}" for i in range(n_raw)), True)


class TestScore:
    def test_transe_zero(self):
        p = make_params("transe")
        p.tensors["relation_emb"][0] = 0.0
        assert score(p, [0, 0], 0, [0, 0]) == 0.0

    def test_distmult_example(self):
        p = make_params("distmult")
        p.tensors["relation_emb"][0] = [1.0, 0.0]
        assert score(p, [1.0, 2.0], 0, [3.0, 4.0]) == 3.0

    def test_transe_exact_translation(self):
        p = make_params("transe")
        p.tensors["relation_emb"][0] = [0.0, 1.0]
        assert score(p, [1.0, 0.0], 0, [1.0, 1.0]) == 0.0

    def test_linear_returns_logits(self):
        p = make_params("linear")
        out = score(p, [1.0, 2.0], 0, [3.0, 4.0])
        assert out.shape == (2,)
        h = np.maximum(p["head_w1"] @ np.array([1.0, 2.0, 3.0, 4.0]) + p["head_b1"], 0.0)
        np.testing.assert_allclose(out, p["head_w2"] @ h + p["head_b2"])

    def test_linear_single_layer(self):
        cfg = ModelConfig(4, 4, 2, dim=2, n_bases=1, score="linear", hidden=0)
        p = ModelParams.initialize(cfg, np.random.default_rng(0))
        assert "head_w1" not in p.names()
        np.testing.assert_allclose(score(p, [1.0, 0.0], 0, [0.0, 1.0]),
                                   p["head_w2"] @ np.array([1.0, 0.0, 0.0, 1.0]) + p["head_b2"])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        h, t = rng.normal(size=4), rng.normal(size=4)
        dm = make_params("distmult", dim=4, seed=seed)
        assert np.isclose(score(dm, h, 1, t), score(dm, t, 1, h), rtol=1e-12)
        te = make_params("transe", dim=4, seed=seed)
        assert score(te, h, 1, t) != score(te, t, 1, h)


class TestEffectiveWeight:
    def test_single_basis(self):
        bases = np.random.default_rng(0).normal(size=(1, 2, 4))
        assert np.array_equal(effective_weight(np.array([[1.0]]), bases, 0), bases[0])

    def test_zero_coefficients(self):
        bases = np.random.default_rng(0).normal(size=(3, 2, 4))
        assert not effective_weight(np.zeros((1, 3)), bases, 0).any()

    def test_two_bases(self):
        bases = np.random.default_rng(0).normal(size=(2, 2, 4))
        w = effective_weight(np.array([[2.0, -1.0]]), bases, 0)
        for i in range(2):
            for j in range(4):
                assert w[i, j] == 2.0 * bases[0, i, j] - bases[1, i, j]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_linear_in_coefficients(self, seed):
        rng = np.random.default_rng(seed)
        bases = rng.normal(size=(3, 2, 4))
        a1, a2 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        np.testing.assert_allclose(effective_weight(a1 + a2, bases, 0),
                                   effective_weight(a1, bases, 0) + effective_weight(a2, bases, 0), atol=1e-12)


def single_basis(p, prefix, w):
    """Make every relation's weight equal ``w`` (B = 1)."""
    p.tensors[f"{prefix}_bases"] = w[None].copy()
    p.tensors[f"{prefix}_coeffs"] = np.ones_like(p[f"{prefix}_coeffs"])


class TestInductive:
    def setup_method(self):
        self.vocab = vocab_for()
        self.seen = np.array([True, True, True, True, False, False])
        self.p = make_params(seen=self.seen)

    def run(self, entities, supports):
        idx = build_support_index(entities, supports, self.vocab)
        return inductive_embed(self.p.as_vars(), idx, self.seen).value

    def test_projection_returns_neighbor(self):
        single_basis(self.p, "ind", np.hstack([np.zeros((2, 2)), np.eye(2)]))
        phi = self.run([4], [np.array([[4, 0, 1]])])
        np.testing.assert_array_equal(phi[0], self.p["entity_emb"][1])

    def test_duplicate_entries_idempotent(self):
        one = self.run([4], [np.array([[4, 0, 1]])])
        two = self.run([4], [np.array([[4, 0, 1], [4, 0, 1]])])
        np.testing.assert_allclose(one, two, rtol=1e-15)

    def test_hand_computed_two_entries(self):
        self.p.tensors["ind_coeffs"] = np.random.default_rng(3).normal(size=self.p["ind_coeffs"].shape)
        phi = self.run([4], [np.array([[4, 0, 1], [2, 1, 4]])])
        E, R = self.p["entity_emb"], self.p["relation_emb"]
        w0 = self.p["ind_coeffs"][0, 0] * self.p["ind_bases"][0]
        w3 = self.p["ind_coeffs"][3, 0] * self.p["ind_bases"][0]
        expected = 0.5 * (w0 @ np.concatenate([R[0], E[1]]) + w3 @ np.concatenate([R[3], E[2]]))
        np.testing.assert_allclose(phi[0], expected, rtol=1e-12)

    def test_unseen_neighbor_zero(self):
        single_basis(self.p, "ind", np.hstack([np.eye(2), np.eye(2)]))
        self.p.tensors["entity_emb"][5] = 99.0  # must be ignored: entity 5 is unseen
        phi = self.run([4], [np.array([[4, 0, 5]])])
        np.testing.assert_allclose(phi[0], self.p["relation_emb"][0])

    def test_empty_support(self):
        with pytest.raises(ValueError):
            self.run([4], [np.zeros((0, 3), dtype=np.int64)])

    def test_support_must_contain_entity(self):
        with pytest.raises(ValueError):
            self.run([4], [np.array([[0, 0, 1]])])

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(range(4)))
    def test_permutation_invariant(self, perm):
        rows = np.array([[4, 0, 1], [2, 1, 4], [4, 1, 0], [3, 0, 4]])
        base = self.run([4], [rows])
        assert np.array_equal(base, self.run([4], [rows[list(perm)]]))


class TestTransductive:
    def setup_method(self):
        self.vocab = vocab_for()
        self.seen = np.array([True, True, True, True, False, False])
        self.p = make_params(seen=self.seen)

    def test_pure_self_connection(self):
        idx = build_support_index([4], [np.array([[4, 0, 1]])], self.vocab)
        P = self.p.as_vars()
        self.p.tensors["mu_coeffs"][:] = 0.0
        self.p.tensors["mu_self"] = np.eye(2)
        P = self.p.as_vars()
        phi = ad.Var(np.array([[0.3, -0.7]]))
        out = transductive_embed(P, "mu", idx, self.seen, phi).value
        np.testing.assert_array_equal(out, phi.value)

    def test_reduces_to_inductive_without_unseen_neighbors(self):
        idx = build_support_index([4], [np.array([[4, 0, 1], [2, 1, 4]])], self.vocab)
        self.p.tensors["mu_bases"] = self.p["ind_bases"].copy()
        self.p.tensors["mu_coeffs"] = self.p["ind_coeffs"].copy()
        self.p.tensors["mu_self"] = np.zeros((2, 2))
        P = self.p.as_vars()
        phi = inductive_embed(P, idx, self.seen)
        assert np.array_equal(transductive_embed(P, "mu", idx, self.seen, phi).value, phi.value)

    def test_partners_use_inductive_embedding(self):
        rows4 = np.array([[4, 0, 5], [4, 1, 0]])
        rows5 = np.array([[4, 0, 5]])
        idx = build_support_index([4, 5], [rows4, rows5], self.vocab)
        P = self.p.as_vars()
        phi = inductive_embed(P, idx, self.seen).value
        out = transductive_embed(P, "mu", idx, self.seen, ad.Var(phi)).value
        E, R = self.p["entity_emb"], self.p["relation_emb"]
        W = lambda r: effective_weight(self.p["mu_coeffs"], self.p["mu_bases"], r)  # noqa: E731
        W0 = self.p["mu_self"]
        exp4 = 0.5 * (W(0) @ np.concatenate([R[0], phi[1]]) + W(1) @ np.concatenate([R[1], E[0]])) + W0 @ phi[0]
        exp5 = W(2) @ np.concatenate([R[2], phi[0]]) + W0 @ phi[1]
        np.testing.assert_allclose(out, [exp4, exp5], rtol=1e-12)
        # inductive layer saw the partner as a zero vector
        Wi = lambda r: effective_weight(self.p["ind_coeffs"], self.p["ind_bases"], r)  # noqa: E731
        np.testing.assert_allclose(phi[1], Wi(2) @ np.concatenate([R[2], np.zeros(2)]), rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_sigma_positive(self, seed):
        rng = np.random.default_rng(seed)
        self.p.tensors["sigma_self"] = rng.normal(0, 50, (2, 2))
        idx = build_support_index([4], [np.array([[4, 0, 1]])], self.vocab)
        emb = embed_task(self.p.as_vars(), idx, self.seen, transductive=True, stochastic=True, dropout=0.3,
                         dropout_mode="train", rng=rng)
        assert np.all(emb.sigma.value >= SIGMA_FLOOR)


class TestSampling:
    def test_sigma_to_zero(self):
        mu = np.array([1.0, -2.0])
        np.testing.assert_allclose(sample_embedding(mu, np.full(2, 1e-300), np.random.default_rng(0)), mu)

    def test_reproducible(self):
        a = sample_embedding([0.0, 1.0], [1.0, 2.0], np.random.default_rng(5))
        b = sample_embedding([0.0, 1.0], [1.0, 2.0], np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_monte_carlo_mean(self):
        mu, sigma = np.array([0.5, -1.0]), np.array([2.0, 0.1])
        draws = sample_embedding(np.broadcast_to(mu, (10 ** 5, 2)), sigma, np.random.default_rng(0))
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * sigma / np.sqrt(10 ** 5))


class TestDropout:
    def test_rate_zero_identity(self):
        x = np.arange(5.0)
        assert apply_dropout(x, 0.0, "train", np.random.default_rng(0)) is x

    def test_off_identity(self):
        x = np.arange(5.0)
        assert apply_dropout(x, 0.9, "off", np.random.default_rng(0)) is x

    def test_expectation_preserved(self):
        x = np.linspace(-1, 1, 7)
        rng = np.random.default_rng(0)
        mean = np.mean([apply_dropout(x, 0.5, "mc_test", rng) for _ in range(10 ** 5)], axis=0)
        assert np.all(np.abs(mean - x) < 4 * np.abs(x) / np.sqrt(10 ** 5) + 1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            apply_dropout(np.ones(2), 1.0, "train", np.random.default_rng(0))
        with pytest.raises(ValueError):
            apply_dropout(np.ones(2), 0.1, "bogus", np.random.default_rng(0))


class TestStochasticScore:
    def setup_method(self):
        self.vocab = vocab_for()
        self.seen = np.array([True, True, True, True, False, False])
        self.p = make_params(seen=self.seen)
        self.task = Task([4], [np.array([[4, 0, 1]])], [np.array([[4, 1, 2]])], 1)

    def test_single_sample_equals_one_pass(self):
        emb = EmbeddedTask(self.p, self.task, self.seen, self.vocab, transductive=True, stochastic=True)
        s = stochastic_score(self.p, (4, 1, 2), emb, 1, np.random.default_rng(3), owner=4)
        table = emb.sample(np.random.default_rng(3))
        assert s == score(self.p, table[0], 1, self.p["entity_emb"][2])

    def test_degenerate_sigma(self):
        self.p = make_params(seen=self.seen, dropout=0.0)
        emb = EmbeddedTask(self.p, self.task, self.seen, self.vocab, transductive=True, stochastic=True)
        emb.pre_sigma = np.full_like(emb.pre_sigma, -800.0)  # softplus underflows to 0; only the floor is left
        vals = {stochastic_score(self.p, (4, 1, 2), emb, n, np.random.default_rng(n), owner=4) for n in (1, 5)}
        first = sorted(vals)
        assert np.allclose(first, first[0], rtol=1e-3)

    def test_variance_shrinks(self):
        emb = EmbeddedTask(self.p, self.task, self.seen, self.vocab, transductive=True, stochastic=True)
        spread = {}
        for n in (10, 1000):
            vals = [stochastic_score(self.p, (4, 1, 2), emb, n, np.random.default_rng(s), owner=4) for s in range(40)]
            spread[n] = np.std(vals)
        assert spread[1000] < spread[10] / 4

    def test_invalid_sample_count(self):
        emb = EmbeddedTask(self.p, self.task, self.seen, self.vocab, transductive=False, stochastic=False)
        with pytest.raises(ValueError):
            stochastic_score(self.p, (4, 1, 2), emb, 0, np.random.default_rng(0))


class TestParams:
    def test_shapes(self):
        cfg = ModelConfig(10, 6, 3, dim=4, n_bases=2)
        shapes = param_shapes(cfg)
        assert shapes["ind_bases"] == (2, 4, 8) and shapes["mu_self"] == (4, 4)
        assert list(shapes)[:2] == ["entity_emb", "relation_emb"]

    def test_unseen_zero_init(self):
        seen = np.array([True, False, True, False, True, True])
        p = make_params(seen=seen)
        assert not p["entity_emb"][~seen].any() and p["entity_emb"][seen].all()

    def test_shape_validation(self):
        p = make_params()
        bad = dict(p.tensors)
        bad["mu_self"] = np.zeros((3, 3))
        with pytest.raises(ValueError):
            ModelParams(p.config, bad)

    @pytest.mark.parametrize("kw", [dict(score="rotate"), dict(dim=0), dict(dropout=1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(4, 2, 1, **kw)
