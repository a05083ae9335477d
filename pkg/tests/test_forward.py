import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtsde.errors import DimensionError, ParameterError
from cdtsde.forward import (
    DomainPair,
    domain_mixture,
    forward_marginal_sample,
    markov_chain,
    markov_step,
    mixture_increment,
    truncated_init,
)
from cdtsde.mixfield import ModNet, build_mixfield_dynamic, build_mixfield_linear
from cdtsde.schedules import make_vp_schedule


def random_field(sched, C, H, W, seed):
    net = ModNet(C, seed=seed, zero_final=False)
    return build_mixfield_dynamic(net, sched, C, H, W)


def random_pair(shape, seed):
    rng = np.random.default_rng(seed)
    return DomainPair(rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape))


class TestDomainPair:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            DomainPair(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))

    def test_mask_shape(self):
        with pytest.raises(DimensionError):
            DomainPair(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((3, 3), bool))


class TestMixture:
    def test_endpoints(self):
        p = random_pair((2, 3, 3), 0)
        np.testing.assert_array_equal(domain_mixture(np.zeros((2, 3, 3)), p), p.x_tgt)
        np.testing.assert_array_equal(domain_mixture(np.ones((2, 3, 3)), p), p.x_src)

    def test_field_shape_mismatch(self):
        with pytest.raises(DimensionError):
            domain_mixture(np.zeros((3, 3, 3)), random_pair((2, 3, 3), 0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_increment_identity(self, seed):
        rng = np.random.default_rng(seed)
        p = random_pair((2, 4, 4), seed)
        a, b = rng.uniform(size=(2, 4, 4)), rng.uniform(size=(2, 4, 4))
        lhs = domain_mixture(a, p) - domain_mixture(b, p)
        assert np.max(np.abs(lhs - mixture_increment(a, b, p))) < 1e-12


@pytest.fixture(scope="module")
def setup():
    s = make_vp_schedule(200)
    return s, random_field(s, 1, 4, 4, 3), random_pair((1, 4, 4), 7)


class TestMarginals:
    def test_marginal_moments(self, setup):
        s, L, p = setup
        t = 120
        x = forward_marginal_sample(s, L, p, t, np.random.default_rng(0), n=20000)
        mean = np.sqrt(s.alpha_bar[t]) * domain_mixture(L.at(t), p)
        se = s.sigma[t] / np.sqrt(20000)
        assert np.max(np.abs(x.mean(0) - mean)) < 4.5 * se
        ratio = x.var(0) / s.sigma[t] ** 2
        assert ratio.min() > 0.95 and ratio.max() < 1.05

    def test_chain_matches_marginal(self, setup):
        s, L, p = setup
        for t in (50, 100, 150):
            x = markov_chain(s, L, p, t, np.random.default_rng(t), n=20000)
            mean = np.sqrt(s.alpha_bar[t]) * domain_mixture(L.at(t), p)
            se = s.sigma[t] / np.sqrt(20000)
            assert np.max(np.abs(x.mean(0) - mean)) < 4.5 * se
            ratio = x.var(0) / s.sigma[t] ** 2
            assert ratio.min() > 0.9 and ratio.max() < 1.1

    def test_one_step_transition_is_exact_in_mean_and_variance(self, setup):
        # closed form: x_{t-1} at its marginal mean maps to the marginal mean at t
        s, L, p = setup
        t = 77
        m_prev = np.sqrt(s.alpha_bar[t - 1]) * domain_mixture(L.at(t - 1), p)
        m_t = np.sqrt(s.alpha_bar[t]) * domain_mixture(L.at(t), p)
        step_mean = s.rho[t] * m_prev + np.sqrt(s.alpha_bar[t]) * mixture_increment(L.at(t), L.at(t - 1), p)
        np.testing.assert_allclose(step_mean, m_t, atol=1e-14)
        assert abs(s.rho[t] ** 2 * s.sigma[t - 1] ** 2 + 1 - s.rho[t] ** 2 - s.sigma[t] ** 2) < 1e-14

    def test_markov_step_shape(self, setup):
        s, L, p = setup
        x = markov_step(s, L, p, p.x_tgt, 1, np.random.default_rng(0))
        assert x.shape == p.x_tgt.shape

    def test_bad_step(self, setup):
        s, L, p = setup
        with pytest.raises(ParameterError):
            forward_marginal_sample(s, L, p, 0, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            forward_marginal_sample(s, L, p, s.T + 1, np.random.default_rng(0))

    def test_seeded_reproducibility(self, setup):
        s, L, p = setup
        a = forward_marginal_sample(s, L, p, 10, np.random.default_rng(5))
        b = forward_marginal_sample(s, L, p, 10, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestTruncatedInit:
    def test_moments(self):
        s = make_vp_schedule(1000)
        x_src = np.linspace(-1, 1, 12).reshape(1, 3, 4)
        rng = np.random.default_rng(0)
        draws = np.stack([truncated_init(s, x_src, 400, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.var(0) / s.sigma[400] ** 2, 1.0, atol=0.05)
        se = s.sigma[400] / np.sqrt(20000)
        assert np.max(np.abs(draws.mean(0) - np.sqrt(s.alpha_bar[400]) * x_src)) < 4.5 * se

    def test_half_signal(self):
        s = make_vp_schedule(1000)
        t1 = int(np.argmin(np.abs(s.alpha_bar - 0.5)))
        x = truncated_init(s, np.ones((1, 2, 2)), t1, np.random.default_rng(0))
        assert x.shape == (1, 2, 2)
        assert abs(s.alpha_bar[t1] - 0.5) < 0.01

    @pytest.mark.parametrize("t1", [0, 1000, 1200])
    def test_range(self, t1):
        with pytest.raises(ParameterError):
            truncated_init(make_vp_schedule(1000), np.zeros((1, 2, 2)), t1, np.random.default_rng(0))

    def test_agrees_with_truncated_field_marginal(self):
        s = make_vp_schedule(100)
        L = build_mixfield_linear(s, 1, 2, 2).truncated(60)
        p = random_pair((1, 2, 2), 1)
        mean = np.sqrt(s.alpha_bar[60]) * domain_mixture(L.at(60), p)
        np.testing.assert_allclose(mean, np.sqrt(s.alpha_bar[60]) * p.x_src)


def test_variance_independent_of_field():
    s = make_vp_schedule(100)
    p = random_pair((1, 3, 3), 2)
    for L in (build_mixfield_linear(s, 1, 3, 3), random_field(s, 1, 3, 3, 11)):
        x = forward_marginal_sample(s, L, p, 40, np.random.default_rng(0), n=20000)
        np.testing.assert_allclose(x.var(0) / s.sigma[40] ** 2, 1.0, atol=0.05)
