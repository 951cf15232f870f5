import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stab import tensor as T
from stab.errors import ContractError, DimensionError
from stab.stochastic import (
    EmbeddingMixture,
    GumbelSampler,
    KlAccumulator,
    LwtaLayer,
    gumbel_from_uniform,
    gumbel_noise,
    kl_to_uniform,
    lwta_forward,
    mixture_embed,
)
from stab.tensor import Tensor, finite_difference_check


def logit_layer(eta) -> LwtaLayer:
    """LWTA layer on a single zero input whose responses are exactly ``eta``."""
    eta = np.asarray(eta, dtype=np.float64)
    layer = LwtaLayer(1, 1, eta.size, np.random.default_rng(0))
    layer.weight.data = np.zeros((1, eta.size))
    layer.bias.data = eta.copy()
    return layer


def winners(eta, draws, temperature, seed=0):
    """Relaxed samples xi for logits ``eta``, recovered from the layer output xi * eta."""
    # xi is invariant to a common shift, which keeps every logit away from zero
    shifted = np.asarray(eta, dtype=np.float64) - np.min(eta) + 10.0
    layer = logit_layer(shifted)
    out = lwta_forward(Tensor(np.zeros((draws, 1))), layer, temperature, GumbelSampler(seed, 1), None, True)
    return out.data / shifted


class TestGumbelNoise:
    def test_forced_z_gives_zero(self):
        assert gumbel_from_uniform(math.exp(-1)) == pytest.approx(0.0, abs=1e-15)

    def test_forced_z_gives_one(self):
        assert gumbel_from_uniform(math.exp(-math.exp(-1))) == pytest.approx(1.0, abs=1e-12)

    def test_clamped_at_boundaries(self):
        g = gumbel_from_uniform([0.0, 1.0])
        assert np.all(np.isfinite(g))
        np.testing.assert_allclose(g, [-math.log(-math.log(1e-12)), -math.log(-math.log(1 - 1e-12))])

    def test_mean_near_euler_gamma(self):
        g = gumbel_noise((200_000,), GumbelSampler(7, 0)).data
        assert abs(g.mean() - oracles.EULER_GAMMA) < 0.01

    def test_empty_shape_rejected(self):
        with pytest.raises(ContractError):
            gumbel_noise((), GumbelSampler(0))


class TestSampler:
    def test_same_seed_and_stream_reproduce(self):
        a, b = GumbelSampler(3, 5), GumbelSampler(3, 5)
        np.testing.assert_array_equal(a.gumbel((4, 3)), b.gumbel((4, 3)))
        np.testing.assert_array_equal(a.dropout_mask((10,), 0.5), b.dropout_mask((10,), 0.5))

    def test_streams_differ(self):
        a, b = GumbelSampler(3, 1).uniform(1000), GumbelSampler(3, 2).uniform(1000)
        assert not np.array_equal(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.1

    def test_dropout_mask_values(self):
        m = GumbelSampler(0).dropout_mask((10_000,), 0.25)
        assert set(np.unique(m)) <= {0.0, 1 / 0.75}
        assert abs(np.mean(m == 0) - 0.25) < 0.02


class TestKlToUniform:
    def test_uniform_is_zero(self):
        assert kl_to_uniform([0.5, 0.5]) == 0.0

    def test_one_hot_is_log_u(self):
        assert kl_to_uniform([1.0, 0.0]) == pytest.approx(0.693147, abs=1e-6)
        assert kl_to_uniform([0.0, 0.0, 1.0, 0.0]) == pytest.approx(math.log(4), abs=1e-15)

    def test_not_normalized(self):
        with pytest.raises(ContractError):
            kl_to_uniform([0.5, 0.6])
        with pytest.raises(ContractError):
            kl_to_uniform([1.5, -0.5])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-3))
    def test_non_negative_and_matches_formula(self, w):
        q = np.asarray(w) / np.sum(w)
        assert kl_to_uniform(q) >= 0.0
        assert kl_to_uniform(q) == pytest.approx(max(oracles.kl_uniform(q), 0.0), abs=1e-12)


class TestLwta:
    def test_dominant_logit_test_mode(self):
        out = lwta_forward(Tensor(np.zeros((1, 1))), logit_layer([5.0, -5.0]), 0.01, None, None, False)
        np.testing.assert_allclose(out.data, [[5.0, 0.0]], atol=5e-4)
        np.testing.assert_allclose(out.data[0] / [5.0, -5.0], [1.0, 0.0], atol=1e-4)

    @pytest.mark.parametrize("c", [-3.0, 0.0, 2.5, 40.0])
    def test_equal_logits_have_zero_kl(self, c):
        kl = KlAccumulator()
        lwta_forward(Tensor(np.zeros((1, 1))), logit_layer([c, c]), 0.69, None, kl, False)
        assert abs(kl.value) < 1e-12

    def test_log_three_wins_three_quarters(self):
        xi = winners([math.log(3), 0.0], 100_000, 0.01)
        assert abs(np.mean(xi.argmax(axis=1) == 0) - 0.75) < 0.01

    def test_matches_reference_in_test_mode(self, rng):
        layer = LwtaLayer(5, 3, 2, rng)
        x = rng.standard_normal((4, 5))
        kl = KlAccumulator()
        out = lwta_forward(Tensor(x), layer, 0.69, None, kl, False)
        ref, ref_kl = oracles.lwta_test_mode(x, layer.weight.data, layer.bias.data, 2, 0.69)
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-14)
        assert kl.value == pytest.approx(ref_kl.sum(), abs=1e-9)
        assert kl.term_count == 4 * 3

    def test_output_width(self, rng):
        layer = LwtaLayer(3, 4, 3, rng)
        out = lwta_forward(Tensor(rng.standard_normal((2, 5, 3))), layer, 0.69, GumbelSampler(0), None, True)
        assert out.shape == (2, 5, 12)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            lwta_forward(Tensor(np.ones((2, 4))), LwtaLayer(3, 2, 2, rng), 0.5, None, None, False)

    def test_block_size_one_rejected(self, rng):
        with pytest.raises(ContractError):
            LwtaLayer(3, 2, 1, rng)

    def test_exactly_one_winner_test_mode(self, rng):
        # gap >= 0.1 between the top two logits and |eta_max| >= 0.1
        checked = 0
        while checked < 500:
            eta = rng.normal(0, 2, size=2)
            top = np.sort(eta)
            if top[1] - top[0] < 0.1 or abs(eta.max()) < 0.1:
                continue
            out = lwta_forward(Tensor(np.zeros((1, 1))), logit_layer(eta), 0.01, None, None, False).data[0]
            w = int(np.argmax(eta))
            assert abs(out[1 - w]) < 1e-3 * abs(eta[w])
            checked += 1

    def test_hard_sparsity_with_separated_logits(self, rng):
        eta = np.array([1.5, -1.5])
        xi = winners(eta, 10_000, 0.01, seed=4)
        assert np.mean(xi.max(axis=1) > 0.99) >= 0.99

    @pytest.mark.parametrize("gap", [0.0, 0.5, 1.5, 3.0])
    def test_soft_draw_rate_matches_closed_form(self, gap):
        # max(xi) <= 0.99 iff |gap + g1 - g2| < T log 99, with g1 - g2 standard logistic
        T_ = 0.01
        c = T_ * math.log(99)
        sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
        expected = sig(c - gap) - sig(-c - gap)
        xi = winners([gap, 0.0], 100_000, T_, seed=9)
        observed = np.mean(xi.max(axis=1) <= 0.99)
        assert abs(observed - expected) < 4 * math.sqrt(expected * (1 - expected) / 100_000) + 1e-4

    def test_gradient_test_mode(self, rng):
        layer = LwtaLayer(4, 3, 2, rng)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        R = Tensor(rng.standard_normal((3, 6)))

        def f(_):
            kl = KlAccumulator()
            out = lwta_forward(x, layer, 0.69, None, kl, False)
            return T.sum_(out * R) + kl.total()

        for t in (x, layer.weight, layer.bias):
            assert finite_difference_check(f, t, 1e-5) < 1e-5


class TestMixtureEmbedding:
    def test_single_component_is_linear_and_bitwise(self, rng):
        layer = EmbeddingMixture(1, 4, rng)
        x = rng.standard_normal((6, 1))
        kl = KlAccumulator()
        # no sampler: the sampling path must not run
        out = mixture_embed(Tensor(x), layer, 0.69, None, kl, True)
        assert np.array_equal(out.data, x @ layer.weight.data + layer.bias.data[0])
        assert kl.value == 0.0
        np.testing.assert_array_equal(layer.selection_probs(x), np.ones((6, 1)))

    def test_zero_input_uniform_selection(self, rng):
        layer = EmbeddingMixture(5, 3, rng)
        layer.sel_bias.data[:] = 0.0
        np.testing.assert_allclose(layer.selection_probs([0.0]), np.full((1, 5), 0.2), atol=1e-15)

    def test_two_component_posterior(self, rng):
        layer = EmbeddingMixture(2, 3, rng)
        layer.sel_weight.data = np.array([1.0, 0.0])
        layer.sel_bias.data = np.array([0.0, 0.0])
        p = layer.selection_probs([2.0])[0]
        np.testing.assert_allclose(p, [0.8808, 0.1192], atol=5e-5)
        np.testing.assert_allclose(p, [math.e**2 / (math.e**2 + 1), 1 / (math.e**2 + 1)], rtol=1e-14)

    def test_matches_reference_in_test_mode(self, rng):
        layer = EmbeddingMixture(6, 4, rng)
        x = rng.standard_normal(7)
        kl = KlAccumulator()
        out = mixture_embed(Tensor(x), layer, 0.69, None, kl, False)
        ref, ref_kl = oracles.mixture_test_mode(
            x, layer.weight.data, layer.bias.data, layer.sel_weight.data, layer.sel_bias.data, 0.69
        )
        np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-14)
        assert kl.value == pytest.approx(ref_kl.sum(), abs=1e-9)

    def test_stochastic_output_is_convex_combination_at_low_temperature(self, rng):
        layer = EmbeddingMixture(4, 3, rng)
        x = rng.standard_normal((200, 1))
        out = mixture_embed(Tensor(x), layer, 0.01, GumbelSampler(0, 1), None, True).data
        per_comp = x[:, :, None] * layer.weight.data[None] + layer.bias.data[None]  # (B, J, d)
        nearest = np.min(np.abs(per_comp - out[:, None, :]).max(axis=-1), axis=1)
        assert np.mean(nearest < 1e-3) > 0.9

    def test_rejects_vector_input(self, rng):
        with pytest.raises(DimensionError):
            mixture_embed(Tensor(np.ones((3, 2))), EmbeddingMixture(2, 3, rng), 0.5, None, None, False)

    def test_gradient_test_mode(self, rng):
        layer = EmbeddingMixture(4, 3, rng)
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        R = Tensor(rng.standard_normal((5, 3)))

        def f(_):
            kl = KlAccumulator()
            return T.sum_(mixture_embed(x, layer, 0.69, None, kl, False) * R) + kl.total()

        for t in [x] + layer.parameters():
            assert finite_difference_check(f, t, 1e-5) < 1e-5


class TestKlAccumulator:
    def test_total_equals_sum_of_terms(self, rng):
        kl = KlAccumulator()
        layer = LwtaLayer(3, 4, 2, rng)
        mix = EmbeddingMixture(5, 2, rng)
        x = rng.standard_normal((6, 3))
        lwta_forward(Tensor(x), layer, 0.69, GumbelSampler(1), kl, True)
        mixture_embed(Tensor(x[:, 0]), mix, 0.69, GumbelSampler(2), kl, True)
        eta = (x @ layer.weight.data + layer.bias.data).reshape(6, 4, 2)
        t = x[:, :1] * mix.sel_weight.data + mix.sel_bias.data
        terms = [kl_to_uniform(q) for q in oracles.softmax(eta).reshape(-1, 2)]
        terms += [kl_to_uniform(q) for q in oracles.softmax(t)]
        assert min(terms) >= 0.0
        assert kl.total().item() == pytest.approx(sum(terms), abs=1e-9)
        assert kl.term_count == len(terms)

    def test_reset(self):
        kl = KlAccumulator()
        kl.add(Tensor(2.0), 1)
        kl.reset()
        assert kl.value == 0.0 and kl.term_count == 0 and kl.total().item() == 0.0
