"""Synthetic conversation generator with known word distributions.

Plants a topic-word matrix and a discourse-word matrix over a shared
vocabulary, then generates reply chains: each conversation draws a topic
mixture concentrated on one dominant topic, each message draws a discourse
role, and each token comes from the topic side (via the mixture) or the
discourse side of the planted model. Because the generating side of every
token is recorded, recovery of the planted matrices, role clustering, and
per-word attribution can all be scored exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ConversationInstance, Vocabulary
from .seeding import derive_seed


@dataclass
class PlantedModel:
    topic_word: np.ndarray  # (K, V) rows sum to 1
    disc_word: np.ndarray   # (D, V) rows sum to 1
    topic_share: float      # probability a token comes from the topic side

    @property
    def n_topics(self) -> int:
        return self.topic_word.shape[0]

    @property
    def n_roles(self) -> int:
        return self.disc_word.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.topic_word.shape[1]


@dataclass
class SyntheticCorpus:
    instances: list[ConversationInstance]
    vocab: Vocabulary
    planted: PlantedModel
    conversation_topics: np.ndarray      # dominant topic per conversation
    message_roles: list[list[int]]       # role per message, per conversation
    token_sources: list[list[list[str]]] # "topic"/"discourse" per token

    def flat_roles(self) -> np.ndarray:
        """Roles aligned with the message order of a BowDataset built from
        `instances`."""
        return np.array([r for conv in self.message_roles for r in conv], dtype=np.int64)

    def flat_topics(self) -> np.ndarray:
        """Dominant conversation topic repeated per message, same alignment."""
        out = []
        for ci, conv in enumerate(self.message_roles):
            out.extend([self.conversation_topics[ci]] * len(conv))
        return np.array(out, dtype=np.int64)


def make_planted_model(
    n_topics: int = 5,
    n_roles: int = 4,
    vocab_size: int = 200,
    anchor_mass: float = 0.9,
    anchor_decay: float = 0.85,
    topic_share: float = 0.5,
    topic_vocab_fraction: float = 0.75,
) -> PlantedModel:
    """Plant word distributions with disjoint per-topic and per-role anchors.

    The first `topic_vocab_fraction` of the vocabulary is carved into K
    anchor blocks for topics, the rest into D blocks for roles; each row puts
    `anchor_mass` on its block with geometrically decaying weights (so its
    top words are unambiguous) and spreads the remainder over the whole
    vocabulary.
    """
    n_topic_words = int(vocab_size * topic_vocab_fraction)
    topic_blocks = np.array_split(np.arange(n_topic_words), n_topics)
    role_blocks = np.array_split(np.arange(n_topic_words, vocab_size), n_roles)

    def graded(block: np.ndarray) -> np.ndarray:
        w = anchor_decay ** np.arange(len(block))
        return anchor_mass * w / w.sum()

    topic_word = np.full((n_topics, vocab_size), (1 - anchor_mass) / vocab_size)
    for k, block in enumerate(topic_blocks):
        topic_word[k, block] += graded(block)
    disc_word = np.full((n_roles, vocab_size), (1 - anchor_mass) / vocab_size)
    for d, block in enumerate(role_blocks):
        disc_word[d, block] += graded(block)
    return PlantedModel(topic_word=topic_word, disc_word=disc_word,
                        topic_share=topic_share)


def generate_corpus(
    planted: PlantedModel,
    n_conversations: int = 2000,
    messages_per_conversation: int = 4,
    tokens_per_message: int = 12,
    dominant_topic_mass: float = 0.8,
    role_mix_alpha: float | None = None,
    role_topic_coupling: float = 0.0,
    seed: int = 0,
) -> SyntheticCorpus:
    """Sample conversations from the planted model.

    By default message roles are drawn uniformly and independently. With
    `role_mix_alpha` each conversation first draws its own role mixture from
    Dirichlet(alpha), modeling threads that differ in discourse composition
    (argument-heavy, Q&A, small talk) independently of what they discuss.
    `role_topic_coupling` additionally tilts the mixture toward the role
    paired with the dominant topic (topic t favors role t mod D); 0 keeps
    roles independent of topics.
    """
    rng = np.random.default_rng(derive_seed(seed, "synthetic"))
    K, D, V = planted.n_topics, planted.n_roles, planted.vocab_size
    words = [f"w{i:03d}" for i in range(V)]

    instances = []
    conv_topics = np.empty(n_conversations, dtype=np.int64)
    message_roles: list[list[int]] = []
    token_sources: list[list[list[str]]] = []
    counts = np.zeros(V, dtype=np.int64)

    for ci in range(n_conversations):
        dominant = int(rng.integers(K))
        conv_topics[ci] = dominant
        theta = np.full(K, (1 - dominant_topic_mass) / (K - 1))
        theta[dominant] = dominant_topic_mass
        if role_mix_alpha is None:
            role_mix = np.full(D, 1.0 / D)
        else:
            role_mix = rng.dirichlet(np.full(D, role_mix_alpha))
        role_probs = (1 - role_topic_coupling) * role_mix
        role_probs[dominant % D] += role_topic_coupling
        ids, messages, roles, sources = [], [], [], []
        for mi in range(messages_per_conversation):
            role = int(rng.choice(D, p=role_probs))
            roles.append(role)
            tokens, tags = [], []
            for _ in range(tokens_per_message):
                if rng.random() < planted.topic_share:
                    topic = rng.choice(K, p=theta)
                    word = rng.choice(V, p=planted.topic_word[topic])
                    tags.append("topic")
                else:
                    word = rng.choice(V, p=planted.disc_word[role])
                    tags.append("discourse")
                tokens.append(words[word])
                counts[word] += 1
            ids.append(f"c{ci}_m{mi}")
            messages.append(tokens)
            sources.append(tags)
        instances.append(ConversationInstance(ids=ids, messages=messages))
        message_roles.append(roles)
        token_sources.append(sources)

    vocab = Vocabulary(words=words, counts=[int(c) for c in counts],
                       stop_flags=np.zeros(V, dtype=bool))
    return SyntheticCorpus(instances=instances, vocab=vocab, planted=planted,
                           conversation_topics=conv_topics,
                           message_roles=message_roles,
                           token_sources=token_sources)


def write_fixture_posts(
    corpus: SyntheticCorpus,
    path: str | Path,
    hashtag_by_topic: bool = False,
) -> None:
    """Serialize a synthetic corpus as a raw posts JSONL file.

    Conversations become reply chains; labels carry the planted role name.
    With `hashtag_by_topic` a per-conversation '#t<k>' hashtag is appended to
    the text, giving the hashtag-classification pipeline a planted signal.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for ci, inst in enumerate(corpus.instances):
            for mi, (pid, tokens) in enumerate(zip(inst.ids, inst.messages)):
                text = " ".join(tokens)
                if hashtag_by_topic:
                    text += f" #t{corpus.conversation_topics[ci]}"
                fh.write(json.dumps({
                    "id": pid,
                    "parent_id": inst.ids[mi - 1] if mi else None,
                    "text": text,
                    "label": f"role{corpus.message_roles[ci][mi]}",
                }) + "\n")
