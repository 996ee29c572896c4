"""Objective terms against independent oracles: numerical quadrature for the
Gaussian KLD, direct summation for the categorical KLD, closed-form toy
cases for the likelihood terms, and central finite differences for the
gradients of the combined objective."""

import math

import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.stats import norm

from convodisc.model import ModelConfig, TopicDiscourseModel
from convodisc.objectives import (
    NonFiniteLossError,
    categorical_kld,
    gaussian_kld,
    loss_d,
    loss_x,
    loss_z,
    mi_loss,
    total_loss,
)

from conftest import finite_difference_gradients, make_gradient_check_setup


def zero_model(n_topics=3, n_roles=4, vocab_size=5, **kw) -> TopicDiscourseModel:
    model = TopicDiscourseModel(ModelConfig(n_topics, n_roles, vocab_size, **kw))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TestGaussianKld:
    def test_prior_equals_posterior(self):
        assert float(gaussian_kld(torch.zeros(3), torch.zeros(3))) == 0.0

    def test_closed_form_unit_case(self):
        value = gaussian_kld(torch.tensor([1.0]), torch.tensor([0.0]))
        assert float(value) == pytest.approx(0.5)

    def test_matches_quadrature_100_random_cases(self):
        # Independent oracle: numerically integrate q log(q / p) for the 1-D
        # case against the standard normal prior.
        rng = np.random.default_rng(17)
        for _ in range(100):
            mu = rng.uniform(-3, 3)
            log_sigma = rng.uniform(-1.5, 1.5)
            sigma = math.exp(log_sigma)

            def integrand(x):
                return norm.pdf(x, mu, sigma) * (
                    norm.logpdf(x, mu, sigma) - norm.logpdf(x, 0.0, 1.0))

            oracle, _ = integrate.quad(integrand, mu - 12 * sigma, mu + 12 * sigma,
                                       limit=200)
            ours = float(gaussian_kld(torch.tensor([mu]), torch.tensor([log_sigma])))
            assert ours == pytest.approx(oracle, abs=1e-6)

    def test_non_negative_on_random_draws(self):
        rng = np.random.default_rng(23)
        for _ in range(200):
            mu = torch.tensor(rng.normal(size=4))
            log_sigma = torch.tensor(rng.uniform(-2, 2, size=4))
            assert float(gaussian_kld(mu, log_sigma)) >= 0.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            gaussian_kld(torch.tensor([float("nan")]), torch.tensor([0.0]))


class TestCategoricalKld:
    def test_uniform_vs_uniform(self):
        q = torch.full((4,), 0.25)
        assert float(categorical_kld(q, q)) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform(self):
        q = torch.tensor([1.0, 0.0, 0.0, 0.0])
        p = torch.full((4,), 0.25)
        assert float(categorical_kld(q, p)) == pytest.approx(math.log(4), abs=1e-6)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(29)
        for _ in range(100):
            q = rng.dirichlet(np.ones(6))
            p = rng.dirichlet(np.ones(6)) + 1e-3
            p /= p.sum()
            oracle = sum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)
            ours = float(categorical_kld(torch.tensor(q), torch.tensor(p)))
            assert ours == pytest.approx(oracle, abs=1e-9)

    def test_non_negative(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            q = torch.tensor(rng.dirichlet(np.ones(5)))
            p = torch.tensor(rng.dirichlet(np.ones(5)) + 1e-6)
            p = p / p.sum()
            assert float(categorical_kld(q, p)) >= -1e-12

    def test_zero_in_p_where_q_positive_rejected(self):
        q = torch.tensor([0.5, 0.5])
        p = torch.tensor([1.0, 0.0])
        with pytest.raises(ValueError):
            categorical_kld(q, p)


class TestLossZ:
    def test_empty_conversation_leaves_only_kld(self):
        model = zero_model()
        mu = torch.tensor([1.0, 0.0, 0.0])
        log_sigma = torch.zeros(3)
        theta = torch.full((3,), 1 / 3)
        value = loss_z(torch.zeros(5), theta, mu, log_sigma, model)
        assert float(value.detach()) == pytest.approx(-0.5)

    def test_zero_decoder_gives_uniform_likelihood(self):
        model = zero_model(stop_penalty=0.0)
        c = torch.tensor([2.0, 1.0, 0.0, 1.0, 0.0])  # N_c = 4
        theta = torch.full((3,), 1 / 3)
        value = loss_z(c, theta, torch.zeros(3), torch.zeros(3), model)
        assert float(value.detach()) == pytest.approx(-4 * math.log(5), abs=1e-6)

    def test_large_penalty_drives_stop_mass_to_zero(self):
        # Direct evaluation on a 5-word vocabulary with delta = 20.
        model = TopicDiscourseModel(ModelConfig(3, 4, 5, stop_penalty=20.0), seed=3)
        stop = torch.tensor([True, True, False, False, False])
        theta = torch.tensor([0.5, 0.3, 0.2])
        with torch.no_grad():
            logits = model.topic_decoder(theta) - 20.0 * stop.to(torch.float32)
            p = torch.softmax(logits, dim=-1)
        assert float(p[stop].sum()) <= 1e-6

    def test_penalty_applies_inside_loss(self):
        model = zero_model(stop_penalty=20.0)
        stop = torch.tensor([True, False, False, False, False])
        c = torch.tensor([1.0, 0.0, 0.0, 0.0, 0.0])  # one stop-word token
        theta = torch.full((3,), 1 / 3)
        with_pen = loss_z(c, theta, torch.zeros(3), torch.zeros(3), model, stop)
        without = loss_z(c, theta, torch.zeros(3), torch.zeros(3), model)
        assert float(with_pen.detach()) < float(without.detach()) - 10


class TestLossD:
    def test_uniform_pi_zero_decoder(self):
        model = zero_model(n_roles=4)
        x = torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0])  # N_x = 3
        pi = torch.full((4,), 0.25)
        d = torch.full((4,), 0.25)
        assert float(loss_d(x, pi, d, model).detach()) == pytest.approx(-3 * math.log(5), abs=1e-6)

    def test_one_hot_pi_empty_message(self):
        model = zero_model(n_roles=4)
        pi = torch.tensor([1.0, 0.0, 0.0, 0.0])
        d = torch.tensor([1.0, 0.0, 0.0, 0.0])
        value = loss_d(torch.zeros(5), pi, d, model)
        assert float(value.detach()) == pytest.approx(-math.log(4), abs=1e-6)

    def test_matches_independent_formula(self):
        # Duplicate-formula oracle with explicit loops.
        model = TopicDiscourseModel(ModelConfig(3, 4, 5), seed=21,
                                    dtype=torch.float64)
        rng = np.random.default_rng(5)
        x = rng.integers(0, 3, size=5).astype(float)
        pi = rng.dirichlet(np.ones(4))
        d = rng.dirichlet(np.ones(4))
        W = model.disc_decoder.weight.detach().numpy()
        b = model.disc_decoder.bias.detach().numpy()
        logits = W @ d + b
        log_probs = logits - math.log(sum(math.exp(v) for v in logits))
        recon = sum(x[w] * log_probs[w] for w in range(5))
        kld = sum(p * math.log(p / 0.25) for p in pi if p > 0)
        oracle = recon - kld
        ours = float(loss_d(torch.tensor(x), torch.tensor(pi), torch.tensor(d), model).detach())
        assert ours == pytest.approx(oracle, abs=1e-6)


class TestLossX:
    def test_empty_message(self):
        assert float(loss_x(torch.zeros(3), torch.full((3,), 1 / 3))) == 0.0

    def test_uniform_beta(self):
        x = torch.tensor([2.0, 1.0, 1.0])  # N_x = 4
        beta = torch.full((3,), 1 / 3)
        assert float(loss_x(x, beta)) == pytest.approx(-4 * math.log(3), abs=1e-6)

    def test_arithmetic_case(self):
        x = torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64)
        beta = torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64)
        expected = 2 * math.log(0.5) + math.log(0.25)
        assert float(loss_x(x, beta)) == pytest.approx(expected, abs=1e-9)

    def test_never_positive_for_count_vectors(self):
        rng = np.random.default_rng(37)
        for _ in range(100):
            x = torch.tensor(rng.integers(0, 5, size=6).astype(float))
            beta = torch.tensor(rng.dirichlet(np.ones(6)))
            assert float(loss_x(x, beta)) <= 1e-12


class TestMiLoss:
    def test_zero_when_conditional_equals_marginal(self):
        model = zero_model(n_roles=4)  # zero head -> uniform p(d|z)
        theta = torch.full((3,), 1 / 3)
        marginal = torch.full((4,), 0.25)
        assert float(mi_loss(theta, model, marginal).detach()) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_conditional_vs_uniform(self):
        model = zero_model(n_roles=4)
        with torch.no_grad():
            model.mi_head.bias.copy_(torch.tensor([60.0, 0.0, 0.0, 0.0]))
        theta = torch.full((3,), 1 / 3)
        marginal = torch.full((4,), 0.25)
        assert float(mi_loss(theta, model, marginal).detach()) == pytest.approx(
            math.log(4), abs=1e-6)

    def test_batch_mean_matches_hand_sum(self):
        # Independent recomputation of the per-example KLDs through the head.
        model = TopicDiscourseModel(ModelConfig(3, 4, 5), seed=41,
                                    dtype=torch.float64)
        rng = np.random.default_rng(6)
        thetas = rng.dirichlet(np.ones(3), size=3)
        marginal = rng.dirichlet(np.ones(4)) + 1e-3
        marginal /= marginal.sum()
        W = model.mi_head.weight.detach().numpy()
        b = model.mi_head.bias.detach().numpy()
        expected = []
        for theta in thetas:
            logits = W @ theta + b
            exp = np.exp(logits - logits.max())
            p = exp / exp.sum()
            expected.append(sum(pi * math.log(pi / mi) for pi, mi in zip(p, marginal)))
        ours = mi_loss(torch.tensor(thetas), model, torch.tensor(marginal))
        assert float(ours.mean().detach()) == pytest.approx(np.mean(expected), abs=1e-9)


class TestTotalLoss:
    def _batch(self, model, seed=0):
        rng = np.random.default_rng(seed)
        V = model.config.vocab_size
        x = torch.tensor(rng.integers(0, 3, size=(4, V)).astype(np.float32))
        c = x + torch.tensor(rng.integers(0, 3, size=(4, V)).astype(np.float32))
        return x, c

    def test_lambda_zero_total_is_sum_of_three(self):
        model = TopicDiscourseModel(ModelConfig(3, 4, 6, lambda_mi=0.0), seed=1)
        x, c = self._batch(model)
        _, _, br = total_loss(x, c, model, generator=torch.Generator().manual_seed(0))
        assert br.total == pytest.approx(br.l_z + br.l_d + br.l_x, abs=1e-6)

    def test_breakdown_identity(self):
        model = TopicDiscourseModel(ModelConfig(3, 4, 6, lambda_mi=0.01), seed=2)
        x, c = self._batch(model, seed=1)
        _, _, br = total_loss(x, c, model, generator=torch.Generator().manual_seed(1))
        assert br.total == pytest.approx(
            br.l_z + br.l_d + br.l_x - 0.01 * br.l_mi, abs=1e-6)
        assert br.l_mi >= -1e-8

    def test_batch_permutation_invariance(self):
        model = TopicDiscourseModel(ModelConfig(3, 4, 6), seed=3)
        x, c = self._batch(model, seed=2)
        rng = np.random.default_rng(3)
        eps = torch.tensor(rng.normal(size=(4, 3)).astype(np.float32))
        gum = torch.tensor(rng.gumbel(size=(4, 4)).astype(np.float32))
        _, _, a = total_loss(x, c, model, epsilon=eps, gumbel=gum)
        perm = torch.tensor([2, 0, 3, 1])
        _, _, b = total_loss(x[perm], c[perm], model,
                             epsilon=eps[perm], gumbel=gum[perm])
        for key, value in a.to_dict().items():
            assert value == pytest.approx(b.to_dict()[key], abs=1e-6)

    def test_non_finite_term_named(self):
        model = TopicDiscourseModel(ModelConfig(3, 4, 6), seed=4)
        with torch.no_grad():
            model.mu_layer.weight.fill_(float("inf"))
        x, c = self._batch(model)
        with pytest.raises((NonFiniteLossError, ValueError)):
            total_loss(x, c, model, generator=torch.Generator().manual_seed(0))

    def test_deterministic_mode_needs_no_noise(self):
        model = TopicDiscourseModel(ModelConfig(3, 4, 6), seed=5)
        x, c = self._batch(model)
        _, _, a = total_loss(x, c, model, deterministic=True)
        _, _, b = total_loss(x, c, model, deterministic=True)
        assert a.to_dict() == b.to_dict()


class TestGradients:
    def test_finite_difference_agreement(self):
        # Central differences vs autograd on the negated combined objective,
        # all parameter tensors including the MI head, float64.
        model, inputs = make_gradient_check_setup()
        errors = finite_difference_gradients(model, inputs)
        worst = max(errors.values())
        assert "mi_head.weight" in errors
        assert worst < 1e-4, f"worst relative error {worst}: {errors}"
