"""Shared fixtures and independent oracles used across the suite."""

import numpy as np
import torch

from convodisc.model import ModelConfig, TopicDiscourseModel
from convodisc.objectives import total_loss


def make_gradient_check_setup(
    vocab_size=30, n_topics=3, n_roles=2, batch=4, seed=13,
    topic_hidden=8, disc_hidden=6, lambda_mi=0.1, stop_penalty=5.0,
):
    """Double-precision model plus a fixed batch and fixed noise, so the
    negated objective is a deterministic function of the parameters."""
    config = ModelConfig(n_topics=n_topics, n_roles=n_roles, vocab_size=vocab_size,
                         topic_hidden=topic_hidden, disc_hidden=disc_hidden,
                         lambda_mi=lambda_mi, stop_penalty=stop_penalty)
    model = TopicDiscourseModel(config, seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.integers(0, 4, size=(batch, vocab_size)), dtype=torch.float64)
    c = torch.tensor(
        x.numpy() + rng.integers(0, 3, size=(batch, vocab_size)), dtype=torch.float64)
    stop_flags = torch.zeros(vocab_size, dtype=torch.bool)
    stop_flags[:3] = True  # exercise the stop-penalty path
    epsilon = torch.tensor(rng.normal(size=(batch, n_topics)))
    u = rng.uniform(1e-6, 1 - 1e-6, size=(batch, n_roles))
    gumbel = torch.tensor(-np.log(-np.log(u)))
    with torch.no_grad():
        pi = model.encode_discourse(c)
        marginal = pi.mean(dim=0)
    return model, dict(x_bow=x, c_bow=c, stop_flags=stop_flags,
                       epsilon=epsilon, gumbel=gumbel, mi_marginal=marginal)


def finite_difference_gradients(model, inputs, h=1e-5):
    """Central-difference gradients of the negated objective per parameter
    tensor, compared against autograd. Returns {name: relative error}."""

    def negated_objective() -> torch.Tensor:
        objective, _, _ = total_loss(model=model, **inputs)
        return -objective

    model.zero_grad()
    negated_objective().backward()
    analytic = {name: p.grad.detach().clone()
                for name, p in model.named_parameters()}

    errors = {}
    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                f_plus = negated_objective().item()
            flat[i] = orig - h
            with torch.no_grad():
                f_minus = negated_objective().item()
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2 * h)
        g = analytic[name].view(-1)
        errors[name] = ((fd - g).norm() / max(g.norm().item(), 1e-12)).item()
    return errors
