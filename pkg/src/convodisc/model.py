"""Variational encoder/decoder over bag-of-words conversations.

A conversation-level Gaussian latent drives a topic mixture; a message-level
categorical latent (relaxed with Gumbel-softmax during training) selects a
discourse role. The decoder reconstructs the target message from the sum of
topic-word and discourse-word logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import derive_seed

PROB_FLOOR = 1e-10


@dataclass
class ModelConfig:
    n_topics: int
    n_roles: int
    vocab_size: int
    topic_hidden: int = 200
    disc_hidden: int = 100
    tau: float = 0.5
    lambda_mi: float = 0.01
    stop_penalty: float = 5.0

    def validate(self) -> None:
        if self.n_topics < 2:
            raise ValueError(f"n_topics must be >= 2, got {self.n_topics}")
        if self.n_roles < 2:
            raise ValueError(f"n_roles must be >= 2, got {self.n_roles}")
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.lambda_mi < 0:
            raise ValueError(f"lambda_mi must be >= 0, got {self.lambda_mi}")
        if self.stop_penalty < 0:
            raise ValueError(f"stop_penalty must be >= 0, got {self.stop_penalty}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def gumbel_noise(
    shape: tuple[int, ...],
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Standard Gumbel draws g = -log(-log(u)), u ~ Uniform(0, 1)."""
    u = torch.rand(shape, generator=generator, dtype=dtype)
    inner = -torch.log(u.clamp_min(PROB_FLOOR))
    return -torch.log(inner.clamp_min(PROB_FLOOR))


def first_argmax(t: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Argmax with ties broken by lowest index, guaranteed on every backend."""
    top = t.max(dim=dim, keepdim=True).values
    idx = torch.arange(t.size(dim), device=t.device)
    shape = [1] * t.dim()
    shape[dim] = -1
    idx = idx.view(shape).expand_as(t)
    return torch.where(t == top, idx, torch.full_like(idx, t.size(dim))).amin(dim=dim)


class TopicDiscourseModel(nn.Module):
    """Joint topic/discourse model; all forward passes are pure given noise.

    Layers (single affine+ReLU hidden layer per encoder, plain affine maps
    elsewhere):
      topic encoder   : c_bow -> hidden -> (mu, log_sigma)
      discourse encoder: x_bow -> hidden -> role logits -> pi
      theta map       : z -> topic mixture theta (softmax)
      topic decoder   : theta -> vocabulary logits (rows of the weight are
                        the topic-word distributions after softmax)
      disc decoder    : d -> vocabulary logits (discourse-word distributions)
      mi head         : theta -> role logits, the auxiliary map estimating
                        p(role | topic latent) for the MI penalty
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        K, D, V = config.n_topics, config.n_roles, config.vocab_size
        self.topic_hidden = nn.Linear(V, config.topic_hidden)
        self.mu_layer = nn.Linear(config.topic_hidden, K)
        self.log_sigma_layer = nn.Linear(config.topic_hidden, K)
        self.disc_hidden = nn.Linear(V, config.disc_hidden)
        self.pi_layer = nn.Linear(config.disc_hidden, D)
        self.theta_layer = nn.Linear(K, K)
        self.topic_decoder = nn.Linear(K, V)
        self.disc_decoder = nn.Linear(D, V)
        self.mi_head = nn.Linear(K, D)
        self._init_weights(seed)
        if dtype != torch.float32:
            self.to(dtype)

    def _init_weights(self, seed: int) -> None:
        # Uniform [-0.05, 0.05] weights, zero biases, from a dedicated
        # generator so fixtures are reproducible.
        gen = torch.Generator().manual_seed(derive_seed(seed, "model-init"))
        for module in self.modules():
            if isinstance(module, nn.Linear):
                with torch.no_grad():
                    module.weight.uniform_(-0.05, 0.05, generator=gen)
                    module.bias.zero_()

    # -- encoders -----------------------------------------------------------

    def encode_topic(self, c_bow: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """mu and log_sigma of the conversation topic latent."""
        c_bow = self._check_bow(c_bow, "c_bow")
        h = F.relu(self.topic_hidden(c_bow))
        return self.mu_layer(h), self.log_sigma_layer(h)

    def encode_discourse(self, x_bow: torch.Tensor) -> torch.Tensor:
        """Role probabilities pi for the target message."""
        x_bow = self._check_bow(x_bow, "x_bow")
        h = F.relu(self.disc_hidden(x_bow))
        return F.softmax(self.pi_layer(h), dim=-1)

    def _check_bow(self, t: torch.Tensor, name: str) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.dtype)
        if t.shape[-1] != self.config.vocab_size:
            raise ValueError(
                f"{name} has length {t.shape[-1]}, expected vocab size "
                f"{self.config.vocab_size}"
            )
        return t

    @property
    def dtype(self) -> torch.dtype:
        return self.topic_hidden.weight.dtype

    # -- sampling -----------------------------------------------------------

    def sample_topic(
        self,
        mu: torch.Tensor,
        log_sigma: torch.Tensor,
        epsilon: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Reparameterized draw z = mu + exp(log_sigma) * epsilon."""
        if mu.shape != log_sigma.shape:
            raise ValueError(f"mu shape {tuple(mu.shape)} != log_sigma shape {tuple(log_sigma.shape)}")
        if epsilon is None:
            epsilon = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(log_sigma) * epsilon

    def sample_discourse(
        self,
        pi: torch.Tensor,
        gumbel: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        """Gumbel-softmax relaxation d = softmax((log pi + g) / tau)."""
        if gumbel is None:
            gumbel = gumbel_noise(tuple(pi.shape), generator=generator, dtype=pi.dtype)
        logits = torch.log(pi.clamp_min(PROB_FLOOR)) + gumbel
        return F.softmax(logits / self.config.tau, dim=-1)

    # -- decoding -----------------------------------------------------------

    def topic_mixture(self, z: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.theta_layer(z), dim=-1)

    def decode_logits(self, theta: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if theta.shape[-1] != self.config.n_topics:
            raise ValueError(f"theta has length {theta.shape[-1]}, expected {self.config.n_topics}")
        if d.shape[-1] != self.config.n_roles:
            raise ValueError(f"d has length {d.shape[-1]}, expected {self.config.n_roles}")
        return self.topic_decoder(theta) + self.disc_decoder(d)

    def decode(self, theta: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        """Word distribution beta shared by every position of the message."""
        return F.softmax(self.decode_logits(theta, d), dim=-1)

    def mi_logits(self, theta: torch.Tensor) -> torch.Tensor:
        return self.mi_head(theta)

    # -- corpus-level word distributions -------------------------------------

    def topic_word_matrix(self) -> torch.Tensor:
        """(K, V): row k is the word distribution of topic k."""
        return F.softmax(self.topic_decoder.weight.detach().T, dim=-1)

    def discourse_word_matrix(self) -> torch.Tensor:
        """(D, V): row d is the word distribution of discourse role d."""
        return F.softmax(self.disc_decoder.weight.detach().T, dim=-1)

    # -- deterministic evaluation path ---------------------------------------

    @torch.no_grad()
    def infer(
        self, x_bow: torch.Tensor, c_bow: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Noise-free (theta, pi, d_hard); d_hard is one-hot at argmax(pi)."""
        mu, _ = self.encode_topic(c_bow)
        theta = self.topic_mixture(mu)
        pi = self.encode_discourse(x_bow)
        idx = first_argmax(pi, dim=-1)
        d_hard = F.one_hot(idx, num_classes=self.config.n_roles).to(pi.dtype)
        return theta, pi, d_hard
