"""Training objectives.

Four terms make up the objective: the topic ELBO (conversation
reconstruction from the Gaussian latent, with a stop-word logit penalty),
the discourse ELBO (message reconstruction from the categorical latent),
the target-message reconstruction from both latents, and a mutual-information
penalty that pushes the two latents apart. All terms are per-batch means in
natural log; the trainer minimizes the negated combined objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .model import PROB_FLOOR, TopicDiscourseModel, first_argmax


class NonFiniteLossError(RuntimeError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term}: {value}")
        self.term = term


@dataclass
class LossBreakdown:
    """Per-batch mean of each objective term; total = l_z + l_d + l_x - lambda * l_mi."""

    l_z: float
    l_d: float
    l_x: float
    l_mi: float
    total: float

    def to_dict(self) -> dict:
        return {"l_z": self.l_z, "l_d": self.l_d, "l_x": self.l_x,
                "l_mi": self.l_mi, "total": self.total}


def gaussian_kld(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dimensions.

    Closed form: -0.5 * sum_k (1 + 2*log_sigma_k - mu_k^2 - exp(2*log_sigma_k)).
    """
    if mu.shape != log_sigma.shape:
        raise ValueError(f"mu shape {tuple(mu.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(log_sigma).all()):
        raise ValueError("gaussian_kld requires finite inputs")
    return -0.5 * (1 + 2 * log_sigma - mu.pow(2) - torch.exp(2 * log_sigma)).sum(dim=-1)


def categorical_kld(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) for categorical distributions over the last dimension.

    Uses the convention 0 * log 0 = 0; rejects p_i = 0 wherever q_i > 0.
    """
    q, p = torch.broadcast_tensors(q, p)
    if ((p <= 0) & (q > 0)).any():
        raise ValueError("categorical_kld: p has zero mass where q is positive")
    ratio = torch.where(q > 0, q * (torch.log(q.clamp_min(PROB_FLOOR)) - torch.log(p.clamp_min(PROB_FLOOR))),
                        torch.zeros_like(q))
    return ratio.sum(dim=-1)


def loss_z(
    c_bow: torch.Tensor,
    theta: torch.Tensor,
    mu: torch.Tensor,
    log_sigma: torch.Tensor,
    model: TopicDiscourseModel,
    stop_flags: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Topic ELBO: conversation log-likelihood under the topic decoder minus
    the Gaussian KLD. Stop-flagged vocabulary entries have the penalty
    subtracted from their logits, which suppresses their probability under
    the latent topics (the discourse decoder is left untouched).
    """
    c_bow = torch.as_tensor(c_bow, dtype=model.dtype)
    theta = torch.as_tensor(theta, dtype=model.dtype)
    logits = model.topic_decoder(theta)
    if stop_flags is not None and model.config.stop_penalty > 0:
        mask = torch.as_tensor(stop_flags, dtype=logits.dtype)
        logits = logits - model.config.stop_penalty * mask
    recon = (c_bow * F.log_softmax(logits, dim=-1)).sum(dim=-1)
    return recon - gaussian_kld(mu, log_sigma)


def loss_d(
    x_bow: torch.Tensor,
    pi: torch.Tensor,
    d: torch.Tensor,
    model: TopicDiscourseModel,
) -> torch.Tensor:
    """Discourse ELBO: message log-likelihood under the discourse decoder
    minus KL(pi || uniform)."""
    x_bow = torch.as_tensor(x_bow, dtype=model.dtype)
    pi = torch.as_tensor(pi, dtype=model.dtype)
    d = torch.as_tensor(d, dtype=model.dtype)
    recon = (x_bow * F.log_softmax(model.disc_decoder(d), dim=-1)).sum(dim=-1)
    uniform = torch.full_like(pi, 1.0 / pi.shape[-1])
    return recon - categorical_kld(pi, uniform)


def loss_x(x_bow: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Target-message reconstruction: sum_w x_bow_w * log beta_w."""
    return (x_bow * torch.log(beta.clamp_min(PROB_FLOOR))).sum(dim=-1)


def mi_loss(
    theta: torch.Tensor,
    model: TopicDiscourseModel,
    batch_marginal: torch.Tensor,
) -> torch.Tensor:
    """Mutual-information penalty KL(p(role | topic latent) || p(role)).

    p(role | topic latent) is the learned affine head over theta; the
    marginal is supplied by the caller (batch mean of pi, or uniform).
    Minimizing this drives the conditional toward the marginal, pressuring
    the topic latent to stop predicting discourse roles.
    """
    theta = torch.as_tensor(theta, dtype=model.dtype)
    batch_marginal = torch.as_tensor(batch_marginal, dtype=model.dtype)
    p_d_given_z = F.softmax(model.mi_logits(theta), dim=-1)
    return categorical_kld(p_d_given_z, batch_marginal)


def mi_head_fit_loss(
    theta: torch.Tensor,
    pi: torch.Tensor,
    model: TopicDiscourseModel,
) -> torch.Tensor:
    """Cross-entropy fitting loss that keeps the MI head predictive.

    Fits the head to the current role posteriors with theta detached, so it
    touches only the head's own weights. Without this term the head drifts
    to the marginal and contributes nothing to the penalty.
    """
    log_p = F.log_softmax(model.mi_logits(theta.detach()), dim=-1)
    return -(pi.detach() * log_p).sum(dim=-1).mean()


def total_loss(
    x_bow: torch.Tensor,
    c_bow: torch.Tensor,
    model: TopicDiscourseModel,
    stop_flags: Optional[torch.Tensor] = None,
    epsilon: Optional[torch.Tensor] = None,
    gumbel: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
    mi_marginal: str | torch.Tensor = "batch",
    lambda_mi: Optional[float] = None,
) -> tuple[torch.Tensor, torch.Tensor, LossBreakdown]:
    """Combined objective for one batch (single-sample Monte Carlo estimate).

    Returns (objective, mi_fit, breakdown): `objective` is maximized (the
    trainer minimizes its negation plus `mi_fit`); `breakdown` carries the
    detached per-term means. With deterministic=True the latents come from
    the noise-free evaluation path (theta from mu, hard argmax role).

    mi_marginal: "batch" uses the detached within-batch mean of pi as the
    role marginal, "uniform" uses 1/D; a tensor pins the marginal to a
    fixed value (the gradient checks rely on this to keep the objective a
    pure function of the parameters).

    lambda_mi overrides the config trade-off weight; the trainer uses it to
    implement penalty warm-up schedules.
    """
    if isinstance(mi_marginal, str) and mi_marginal not in ("batch", "uniform"):
        raise ValueError(f"mi_marginal must be 'batch' or 'uniform', got {mi_marginal!r}")
    x_bow = torch.as_tensor(x_bow, dtype=model.dtype)
    c_bow = torch.as_tensor(c_bow, dtype=model.dtype)

    mu, log_sigma = model.encode_topic(c_bow)
    pi = model.encode_discourse(x_bow)
    if deterministic:
        z = mu
        idx = first_argmax(pi, dim=-1)
        d = F.one_hot(idx, num_classes=model.config.n_roles).to(pi.dtype)
    else:
        z = model.sample_topic(mu, log_sigma, epsilon=epsilon, generator=generator)
        d = model.sample_discourse(pi, gumbel=gumbel, generator=generator)
    theta = model.topic_mixture(z)

    # Reduce in float64: batch means must be stable to summation order.
    l_z = loss_z(c_bow, theta, mu, log_sigma, model, stop_flags).double().mean()
    l_d = loss_d(x_bow, pi, d, model).double().mean()
    l_x = loss_x(x_bow, model.decode(theta, d)).double().mean()

    if isinstance(mi_marginal, torch.Tensor):
        marginal = mi_marginal.detach().to(model.dtype)
    elif mi_marginal == "batch":
        marginal = pi.detach().mean(dim=0) if pi.dim() > 1 else pi.detach()
    else:
        marginal = torch.full((model.config.n_roles,), 1.0 / model.config.n_roles,
                              dtype=model.dtype)
    l_mi = mi_loss(theta, model, marginal).double().mean()

    lam = model.config.lambda_mi if lambda_mi is None else lambda_mi
    objective = l_z + l_d + l_x - lam * l_mi
    breakdown = LossBreakdown(
        l_z=l_z.item(), l_d=l_d.item(), l_x=l_x.item(), l_mi=l_mi.item(),
        total=objective.item(),
    )
    for name, value in breakdown.to_dict().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)

    mi_fit = mi_head_fit_loss(theta, pi, model)
    return objective, mi_fit, breakdown
