"""Message representations and hashtag-proxy classification.

Extracts [topic mixture; role posterior] feature vectors from a trained
model, builds proxy class labels from frequent hashtags, trains a linear
max-margin classifier on frozen features, and supports joint training of the
model with a convolutional text classifier.
"""

from __future__ import annotations

import copy
import logging
import re
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.svm import LinearSVC

from .corpus import BowDataset, RawPost, Vocabulary
from .model import ModelConfig, TopicDiscourseModel
from .objectives import total_loss
from .seeding import derive_seed
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

_HASHTAG_RE = re.compile(r"#\w+")


def extract_hashtags(text: str) -> list[str]:
    return [tag.lower() for tag in _HASHTAG_RE.findall(text or "")]


@dataclass
class ClassifiedCorpus:
    """Messages labeled with dense hashtag-class ids."""

    message_ids: list[str]
    labels: np.ndarray
    label_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def labels_by_id(self) -> dict[str, int]:
        return dict(zip(self.message_ids, (int(l) for l in self.labels)))


def _resolve_merge_map(merge_map: Mapping[str, str]) -> dict[str, str]:
    """Follow merge chains to a fixpoint so repeated application is a no-op."""
    resolved = {}
    for src in merge_map:
        target = src
        seen = {src}
        while target in merge_map and merge_map[target] != target:
            target = merge_map[target]
            if target in seen:
                raise ValueError(f"merge map cycle involving {src!r}")
            seen.add(target)
        resolved[src] = target
    return resolved


def build_hashtag_labels(
    posts: Sequence[RawPost],
    merge_map: Optional[Mapping[str, str]] = None,
    block_list: Optional[Sequence[str]] = None,
    top_k: int = 50,
) -> ClassifiedCorpus:
    """Label messages with their hashtags as proxy classes.

    Hashtag-less messages are dropped, the merge map unifies spelling
    variants, blocked (non-topical) tags are removed, and only the top_k
    most frequent tags survive. A message carrying several retained tags
    takes the most frequent one, ties broken lexicographically.
    """
    merge = _resolve_merge_map({k.lower(): v.lower() for k, v in (merge_map or {}).items()})
    blocked = {b.lower() for b in (block_list or ())}

    per_message: list[tuple[str, list[str]]] = []
    freq: dict[str, int] = {}
    for post in posts:
        tags = []
        for tag in extract_hashtags(post.text):
            tag = merge.get(tag, tag)
            if tag in blocked:
                continue
            tags.append(tag)
        if not tags:
            continue
        per_message.append((post.id, tags))
        for tag in set(tags):
            freq[tag] = freq.get(tag, 0) + 1

    ranked = sorted(freq, key=lambda t: (-freq[t], t))
    if len(ranked) < top_k:
        logger.warning("only %d distinct hashtags available, keeping all (top_k=%d)",
                       len(ranked), top_k)
    retained = ranked[:top_k]
    retained_set = set(retained)

    label_id = {tag: i for i, tag in enumerate(retained)}
    ids, labels = [], []
    for pid, tags in per_message:
        kept = [t for t in tags if t in retained_set]
        if not kept:
            continue
        best = min(kept, key=lambda t: (-freq[t], t))
        ids.append(pid)
        labels.append(label_id[best])
    return ClassifiedCorpus(message_ids=ids, labels=np.array(labels, dtype=np.int64),
                            label_names=retained)


# ---------------------------------------------------------------------------
# Feature extraction.
# ---------------------------------------------------------------------------

def extract_features(
    x_bow: np.ndarray,
    c_bow: np.ndarray,
    model: TopicDiscourseModel,
) -> np.ndarray:
    """[theta; pi] via the deterministic inference path; length K + D."""
    theta, pi, _ = model.infer(torch.as_tensor(x_bow, dtype=model.dtype),
                               torch.as_tensor(c_bow, dtype=model.dtype))
    return np.concatenate([theta.numpy(), pi.numpy()], axis=-1)


def extract_feature_matrix(
    dataset: BowDataset,
    model: TopicDiscourseModel,
    indices: Optional[Sequence[int]] = None,
    batch: int = 512,
) -> np.ndarray:
    if indices is None:
        indices = range(len(dataset))
    indices = list(indices)
    rows = []
    for start in range(0, len(indices), batch):
        x, c = dataset.dense_batch(indices[start:start + batch])
        rows.append(extract_features(x, c, model))
    K, D = model.config.n_topics, model.config.n_roles
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, K + D))


# ---------------------------------------------------------------------------
# Linear classification on frozen features.
# ---------------------------------------------------------------------------

def classification_metrics(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: Optional[int] = None
) -> tuple[float, float]:
    """(accuracy, macro F1) from the confusion matrix.

    accuracy = trace / N; macro F1 averages per-class F1 over all classes,
    with classes absent from the gold labels contributing 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("gold and predicted labels must be equal-length and non-empty")
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    table = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        table[t, p] += 1
    accuracy = float(np.trace(table) / table.sum())
    f1s = []
    for c in range(n_classes):
        tp = table[c, c]
        precision = tp / table[:, c].sum() if table[:, c].sum() else 0.0
        recall = tp / table[c, :].sum() if table[c, :].sum() else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall else 0.0)
    return accuracy, float(np.mean(f1s))


def per_class_f1(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    out = np.zeros(n_classes)
    for c in range(n_classes):
        tp = int(((y_true == c) & (y_pred == c)).sum())
        pred_c = int((y_pred == c).sum())
        gold_c = int((y_true == c).sum())
        precision = tp / pred_c if pred_c else 0.0
        recall = tp / gold_c if gold_c else 0.0
        out[c] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return out


@dataclass
class ClassifierResult:
    classifier: LinearSVC
    accuracy: float
    macro_f1: float
    n_train: int
    n_test: int


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    test_fraction: float = 0.1,
) -> ClassifierResult:
    """Linear max-margin classifier scored on a held-out split."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("classification needs at least 2 classes")
    n = len(labels)
    rng = np.random.default_rng(derive_seed(seed, "classifier-split"))
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    clf = LinearSVC(random_state=seed)
    clf.fit(features[train_idx], labels[train_idx])
    pred = clf.predict(features[test_idx])
    n_classes = int(labels.max()) + 1
    accuracy, macro_f1 = classification_metrics(labels[test_idx], pred, n_classes)
    return ClassifierResult(classifier=clf, accuracy=accuracy, macro_f1=macro_f1,
                            n_train=len(train_idx), n_test=len(test_idx))


# ---------------------------------------------------------------------------
# Convolutional classifier and joint training.
# ---------------------------------------------------------------------------

@dataclass
class JointConfig:
    embed_dim: int = 200
    filter_widths: tuple[int, ...] = (3, 4, 5)
    n_filters: int = 100
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    model_loss_weight: float = 1.0


class ConvTextClassifier(nn.Module):
    """Word-level CNN: randomly initialized embeddings, parallel convolutions
    with max-over-time pooling, and a linear head over the pooled features
    concatenated with the [theta; pi] representation."""

    def __init__(self, vocab_size: int, n_classes: int, extra_dim: int,
                 config: JointConfig, seed: int = 0):
        super().__init__()
        self.config = config
        # index 0 is padding; real tokens are vocab index + 1
        self.embedding = nn.Embedding(vocab_size + 1, config.embed_dim, padding_idx=0)
        self.convs = nn.ModuleList([
            nn.Conv1d(config.embed_dim, config.n_filters, w)
            for w in config.filter_widths
        ])
        pooled = config.n_filters * len(config.filter_widths)
        self.head = nn.Linear(pooled + extra_dim, n_classes)
        gen = torch.Generator().manual_seed(derive_seed(seed, "classifier-init"))
        with torch.no_grad():
            self.embedding.weight.normal_(0.0, 0.1, generator=gen)
            self.embedding.weight[0].zero_()
            for conv in self.convs:
                conv.weight.uniform_(-0.05, 0.05, generator=gen)
                conv.bias.zero_()
            self.head.weight.uniform_(-0.05, 0.05, generator=gen)
            self.head.bias.zero_()

    def forward(self, token_ids: torch.Tensor, extra: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(token_ids).transpose(1, 2)  # (B, E, L)
        pooled = [F.relu(conv(emb)).amax(dim=2) for conv in self.convs]
        return self.head(torch.cat(pooled + [extra], dim=1))


@dataclass
class LabeledMessages:
    """Classification view over a BowDataset: which rows carry labels,
    their padded-ready token ids, and the dense labels."""

    bow: BowDataset
    indices: np.ndarray
    token_ids: list[np.ndarray]
    labels: np.ndarray
    n_classes: int


def select_labeled(
    bow: BowDataset,
    labels_by_id: Mapping[str, int],
    vocab: Vocabulary,
    n_classes: int,
) -> LabeledMessages:
    indices, token_ids, labels = [], [], []
    seen: set[str] = set()
    for i, mid in enumerate(bow.message_ids):
        if mid in seen or mid not in labels_by_id:
            continue
        seen.add(mid)
        ids = [vocab.get(t) for t in bow.tokens[i]]
        token_ids.append(np.array([j + 1 for j in ids if j is not None], dtype=np.int64))
        indices.append(i)
        labels.append(labels_by_id[mid])
    return LabeledMessages(bow=bow, indices=np.array(indices, dtype=np.int64),
                           token_ids=token_ids,
                           labels=np.array(labels, dtype=np.int64),
                           n_classes=n_classes)


def _pad_tokens(seqs: Sequence[np.ndarray], min_len: int) -> torch.Tensor:
    length = max(min_len, max((len(s) for s in seqs), default=min_len))
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return torch.from_numpy(out)


def _deterministic_features(model: TopicDiscourseModel, x: torch.Tensor,
                            c: torch.Tensor) -> torch.Tensor:
    """Differentiable [theta; pi] with noise-free latents."""
    mu, _ = model.encode_topic(c)
    theta = model.topic_mixture(mu)
    pi = model.encode_discourse(x)
    return torch.cat([theta, pi], dim=-1)


@dataclass
class TextClassifierResult:
    classifier: ConvTextClassifier
    model: TopicDiscourseModel
    accuracy: float
    macro_f1: float
    y_true: np.ndarray
    y_pred: np.ndarray


def train_text_classifier(
    train_data: LabeledMessages,
    test_data: LabeledMessages,
    model: TopicDiscourseModel,
    config: JointConfig,
    seed: int = 0,
    update_model: bool = True,
    stop_flags: Optional[np.ndarray] = None,
) -> TextClassifierResult:
    """Train the CNN classifier, optionally jointly with the topic model.

    With update_model=True the combined objective (cross-entropy plus the
    weighted topic/discourse objective) backpropagates into both components;
    otherwise the topic model is frozen and only supplies features.
    """
    classifier = ConvTextClassifier(
        vocab_size=train_data.bow.vocab_size, n_classes=train_data.n_classes,
        extra_dim=model.config.n_topics + model.config.n_roles,
        config=config, seed=seed,
    )
    params = list(classifier.parameters())
    if update_model:
        params += list(model.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)
    noise_gen = torch.Generator().manual_seed(derive_seed(seed, "joint-noise"))
    flags = None if stop_flags is None else torch.as_tensor(stop_flags, dtype=torch.bool)
    min_len = max(config.filter_widths)
    n = len(train_data.labels)
    labels_t = torch.from_numpy(train_data.labels)

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([derive_seed(seed, "joint-shuffle"), epoch])
        perm = rng.permutation(n)
        classifier.train()
        if update_model:
            model.train()
        else:
            model.eval()
        for start in range(0, n, config.batch_size):
            sel = perm[start:start + config.batch_size]
            x, c = train_data.bow.dense_batch(train_data.indices[sel])
            x_t, c_t = torch.from_numpy(x), torch.from_numpy(c)
            tokens = _pad_tokens([train_data.token_ids[i] for i in sel], min_len)
            optimizer.zero_grad()
            if update_model:
                features = _deterministic_features(model, x_t, c_t)
                objective, mi_fit, _ = total_loss(
                    x_t, c_t, model, stop_flags=flags, generator=noise_gen)
                model_term = config.model_loss_weight * (-objective + mi_fit)
            else:
                with torch.no_grad():
                    features = _deterministic_features(model, x_t, c_t)
                model_term = torch.zeros(())
            logits = classifier(tokens, features)
            ce = F.cross_entropy(logits, labels_t[sel])
            (ce + model_term).backward()
            optimizer.step()

    classifier.eval()
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(test_data.labels), config.batch_size):
            sel = np.arange(start, min(start + config.batch_size, len(test_data.labels)))
            x, c = test_data.bow.dense_batch(test_data.indices[sel])
            features = _deterministic_features(model, torch.from_numpy(x), torch.from_numpy(c))
            tokens = _pad_tokens([test_data.token_ids[i] for i in sel], min_len)
            preds.append(classifier(tokens, features).argmax(dim=1).numpy())
    pred = np.concatenate(preds)
    accuracy, macro_f1 = classification_metrics(test_data.labels, pred,
                                                train_data.n_classes)
    return TextClassifierResult(classifier=classifier, model=model,
                                accuracy=accuracy, macro_f1=macro_f1,
                                y_true=test_data.labels, y_pred=pred)


@dataclass
class JointComparison:
    joint: TextClassifierResult
    separate: TextClassifierResult


def joint_train(
    train_data: LabeledMessages,
    dev_bow: BowDataset,
    test_data: LabeledMessages,
    model_config: ModelConfig,
    train_config: TrainConfig,
    joint_config: JointConfig,
    stop_flags: Optional[np.ndarray] = None,
) -> JointComparison:
    """Run the joint-training path and the separate-train baseline.

    Both arms share one pretrained topic/discourse model (early stopping on
    dev). Separate freezes it while the CNN trains on its features; joint
    fine-tunes a copy of it together with the CNN under the summed
    objective, so gradients flow into both components.
    """
    seed = train_config.seed
    pretrained, _ = train(train_data.bow, dev_bow, model_config, train_config,
                          stop_flags=stop_flags)
    separate = train_text_classifier(train_data, test_data, pretrained,
                                     joint_config, seed=seed, update_model=False,
                                     stop_flags=stop_flags)
    tuned = copy.deepcopy(pretrained)
    joint = train_text_classifier(train_data, test_data, tuned, joint_config,
                                  seed=seed, update_model=True,
                                  stop_flags=stop_flags)
    return JointComparison(joint=joint, separate=separate)
