"""Intrinsic evaluation: top-word extraction, sliding-window NPMI coherence,
clustering agreement metrics against gold labels, label/role alignment
heatmaps, per-word topic-vs-discourse attribution, and Hungarian matching of
learned word distributions to a reference set."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .corpus import Vocabulary
from .model import TopicDiscourseModel

NPMI_EPS = 1e-12


@dataclass
class TopicSummary:
    """Ranked top-N words per row of a word-distribution matrix."""

    words: list[list[str]]
    probabilities: list[list[float]]

    @property
    def n_rows(self) -> int:
        return len(self.words)


def top_n_words(
    word_matrix: np.ndarray | torch.Tensor,
    vocab: Vocabulary,
    n: int,
    exclude_stop: bool = False,
) -> TopicSummary:
    """Top-N words per row, ranked by descending probability, ties by index."""
    matrix = np.asarray(word_matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"word matrix must be 2-D, got shape {matrix.shape}")
    keep = np.arange(matrix.shape[1])
    if exclude_stop:
        keep = keep[~vocab.stop_flags]
    if n > len(keep):
        raise ValueError(f"requested top {n} words but only {len(keep)} are available")
    words, probs = [], []
    for row in matrix:
        sub = row[keep]
        # stable sort on (-prob, index)
        order = np.lexsort((keep, -sub))[:n]
        picked = keep[order]
        words.append([vocab.word(i) for i in picked])
        probs.append([float(row[i]) for i in picked])
    return TopicSummary(words=words, probabilities=probs)


@dataclass
class CoherenceReport:
    per_topic: list[float]
    mean: float
    skipped_pairs: int
    scored_pairs: int
    missing_words: list[str]


def npmi_coherence(
    topics: Sequence[Sequence[str]],
    reference_docs: Sequence[Sequence[str]],
    window: int = 10,
) -> CoherenceReport:
    """Sliding-window NPMI coherence of top-word lists.

    Probabilities are boolean window frequencies: a document of length L
    contributes max(1, L - window + 1) windows, each counted once per word it
    contains. Pair score is log(p_ij / (p_i p_j)) / -log(p_ij); pairs that
    never co-occur score -1, pairs that co-occur in every window score 1.
    Pairs with a word absent from the reference corpus are skipped and
    reported.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    interest = {w for topic in topics for w in topic}
    occur: Counter[str] = Counter()
    joint: Counter[tuple[str, str]] = Counter()
    n_windows = 0
    for doc in reference_docs:
        span = max(1, len(doc) - window + 1)
        for i in range(span):
            n_windows += 1
            present = sorted(set(doc[i:i + window]) & interest)
            occur.update(present)
            joint.update(combinations(present, 2))
    missing = sorted(w for w in interest if occur[w] == 0)

    per_topic: list[float] = []
    skipped = scored = 0
    for topic in topics:
        scores = []
        for wi, wj in combinations(topic, 2):
            if occur[wi] == 0 or occur[wj] == 0:
                skipped += 1
                continue
            key = (wi, wj) if wi <= wj else (wj, wi)
            n_ij = joint[key]
            if n_ij == 0:
                scores.append(-1.0)
            elif n_ij == n_windows:
                scores.append(1.0)
            else:
                p_i = occur[wi] / n_windows
                p_j = occur[wj] / n_windows
                p_ij = n_ij / n_windows
                npmi = math.log((p_ij + NPMI_EPS) / ((p_i * p_j) + NPMI_EPS))
                scores.append(npmi / -math.log(p_ij + NPMI_EPS))
            scored += 1
        per_topic.append(float(np.mean(scores)) if scores else float("nan"))
    finite = [s for s in per_topic if not math.isnan(s)]
    mean = float(np.mean(finite)) if finite else float("nan")
    return CoherenceReport(per_topic=per_topic, mean=mean, skipped_pairs=skipped,
                           scored_pairs=scored, missing_words=missing)


# ---------------------------------------------------------------------------
# Clustering agreement metrics (natural log throughout).
# ---------------------------------------------------------------------------

def _contingency(assignments: Sequence, labels: Sequence) -> np.ndarray:
    if len(assignments) != len(labels):
        raise ValueError(
            f"assignments ({len(assignments)}) and labels ({len(labels)}) differ in length"
        )
    if len(assignments) == 0:
        raise ValueError("empty clustering")
    a_ids = {a: i for i, a in enumerate(sorted(set(assignments), key=repr))}
    l_ids = {l: i for i, l in enumerate(sorted(set(labels), key=repr))}
    table = np.zeros((len(a_ids), len(l_ids)), dtype=np.int64)
    for a, l in zip(assignments, labels):
        table[a_ids[a], l_ids[l]] += 1
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(table: np.ndarray) -> float:
    """H(columns | rows) of a contingency table."""
    n = table.sum()
    h = 0.0
    for row in table:
        total = row.sum()
        if total:
            h += (total / n) * _entropy(row)
    return h


def purity(assignments: Sequence, labels: Sequence) -> float:
    """Fraction of items in the majority gold class of their cluster."""
    table = _contingency(assignments, labels)
    return float(table.max(axis=1).sum() / table.sum())


def homogeneity(assignments: Sequence, labels: Sequence) -> float:
    """1 - H(labels | clusters) / H(labels); 1 when labels carry no entropy."""
    table = _contingency(assignments, labels)
    h_labels = _entropy(table.sum(axis=0))
    if h_labels == 0.0:
        return 1.0
    return 1.0 - _conditional_entropy(table) / h_labels


def variation_of_information(assignments: Sequence, labels: Sequence) -> float:
    """H(labels | clusters) + H(clusters | labels); 0 iff identical partitions."""
    table = _contingency(assignments, labels)
    return _conditional_entropy(table) + _conditional_entropy(table.T)


@dataclass
class AlignmentHeatmap:
    """Row-normalized label x role matrix: entry (l, r) is the fraction of
    label-l messages assigned role r."""

    matrix: np.ndarray
    row_labels: list
    empty_rows: list = field(default_factory=list)


def alignment_matrix(
    assignments: Sequence[int],
    labels: Sequence,
    n_roles: Optional[int] = None,
    label_order: Optional[Sequence] = None,
) -> AlignmentHeatmap:
    if len(assignments) != len(labels):
        raise ValueError(
            f"assignments ({len(assignments)}) and labels ({len(labels)}) differ in length"
        )
    if n_roles is None:
        n_roles = int(max(assignments)) + 1
    rows = list(label_order) if label_order is not None else sorted(set(labels), key=repr)
    row_idx = {l: i for i, l in enumerate(rows)}
    counts = np.zeros((len(rows), n_roles), dtype=np.float64)
    for a, l in zip(assignments, labels):
        if l in row_idx:
            counts[row_idx[l], int(a)] += 1
    totals = counts.sum(axis=1, keepdims=True)
    empty = [rows[i] for i in np.flatnonzero(totals[:, 0] == 0)]
    matrix = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return AlignmentHeatmap(matrix=matrix, row_labels=rows, empty_rows=empty)


# ---------------------------------------------------------------------------
# Per-word attribution and synthetic-recovery scoring.
# ---------------------------------------------------------------------------

@dataclass
class WordAttribution:
    token: str
    tag: str  # "topic" | "discourse" | "unknown"
    p_topic: Optional[float]
    p_discourse: Optional[float]


def word_attribution(
    tokens: Sequence[str],
    theta: torch.Tensor,
    d_hard: torch.Tensor,
    model: TopicDiscourseModel,
    vocab: Vocabulary,
) -> list[WordAttribution]:
    """Tag each token as a topic or discourse word.

    A token is a topic word when its probability under the topic decoder
    (given theta) strictly exceeds its probability under the discourse
    decoder (given the hard role); ties go to discourse, out-of-vocabulary
    tokens are tagged unknown.
    """
    with torch.no_grad():
        p_z = F.softmax(model.topic_decoder(torch.as_tensor(theta, dtype=model.dtype)), dim=-1)
        p_d = F.softmax(model.disc_decoder(torch.as_tensor(d_hard, dtype=model.dtype)), dim=-1)
    out = []
    for token in tokens:
        idx = vocab.get(token)
        if idx is None:
            out.append(WordAttribution(token=token, tag="unknown",
                                       p_topic=None, p_discourse=None))
            continue
        pz, pd = float(p_z[idx]), float(p_d[idx])
        out.append(WordAttribution(
            token=token, tag="topic" if pz > pd else "discourse",
            p_topic=pz, p_discourse=pd,
        ))
    return out


@dataclass
class ClusterAlignment:
    """Result of matching learned word-distribution rows to reference rows.

    permutation[j] is the learned row assigned to reference row j; the
    assignment maximizes summed cosine similarity.
    """

    permutation: np.ndarray
    mean_cosine: float
    mean_top_overlap: float


def align_clusters(
    learned: np.ndarray | torch.Tensor,
    reference: np.ndarray | torch.Tensor,
    top_n: int = 10,
) -> ClusterAlignment:
    learned = np.asarray(learned, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if learned.shape[0] != reference.shape[0]:
        raise ValueError(
            f"row-count mismatch: learned has {learned.shape[0]}, "
            f"reference has {reference.shape[0]}"
        )
    ln = learned / np.maximum(np.linalg.norm(learned, axis=1, keepdims=True), 1e-30)
    rn = reference / np.maximum(np.linalg.norm(reference, axis=1, keepdims=True), 1e-30)
    sim = rn @ ln.T  # sim[j, i]: reference row j vs learned row i
    ref_idx, learned_idx = linear_sum_assignment(-sim)
    perm = np.empty(learned.shape[0], dtype=np.int64)
    perm[ref_idx] = learned_idx
    mean_cos = float(sim[ref_idx, learned_idx].mean())
    overlaps = []
    for j in range(reference.shape[0]):
        top_ref = set(_top_indices(reference[j], top_n))
        top_learned = set(_top_indices(learned[perm[j]], top_n))
        overlaps.append(len(top_ref & top_learned) / top_n)
    return ClusterAlignment(permutation=perm, mean_cosine=mean_cos,
                            mean_top_overlap=float(np.mean(overlaps)))


def _top_indices(row: np.ndarray, n: int) -> np.ndarray:
    return np.lexsort((np.arange(len(row)), -row))[:n]
