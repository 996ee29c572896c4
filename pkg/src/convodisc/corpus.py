"""Reply-thread corpus handling.

Reconstructs reply trees from flat post lists, flattens each tree into
root-to-leaf conversation paths, normalizes tweet-like text into tokens,
builds the vocabulary, and turns messages/conversations into bag-of-words
count vectors.
"""

from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .seeding import derive_seed

HASHTAG_TOKEN = "HASH"
MENTION_TOKEN = "MENT"
URL_TOKEN = "URL"

_URL_PREFIXES = ("http://", "https://")
_PUNCT = set(string.punctuation)


class CorpusError(ValueError):
    """Malformed posts, trees, or vocabulary inputs."""


@dataclass(frozen=True)
class RawPost:
    """One post as it arrives from the input file.

    `label` is an optional gold annotation (dialogue act or hashtag class)
    carried along for evaluation only; the model never sees it.
    """

    id: str
    parent_id: str | None
    text: str
    label: str | None = None


@dataclass
class ConversationTree:
    """Reply tree: one root plus an ordered children map over post ids."""

    root: str
    children: dict[str, list[str]]

    def nodes(self) -> list[str]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(self.children.get(node, [])))
        return out

    def leaves(self) -> list[str]:
        return [n for n in self.nodes() if not self.children.get(n)]


@dataclass
class ConversationInstance:
    """One root-to-leaf path; the unit of training context.

    `messages[i]` is the token list of the post `ids[i]`, ordered root first.
    """

    ids: list[str]
    messages: list[list[str]]

    def __len__(self) -> int:
        return len(self.ids)


def build_trees(posts: Sequence[RawPost]) -> list[ConversationTree]:
    """Group posts into reply trees.

    Posts whose parent_id is missing from the input (common with sampled
    streams) are promoted to roots of their own trees. Duplicate ids and
    reply cycles are rejected.
    """
    by_id: dict[str, RawPost] = {}
    for post in posts:
        if not post.id:
            raise CorpusError("post with empty id")
        if post.id in by_id:
            raise CorpusError(f"duplicate post id: {post.id!r}")
        by_id[post.id] = post

    children: dict[str, list[str]] = {pid: [] for pid in by_id}
    roots: list[str] = []
    for post in posts:
        parent = post.parent_id
        if parent is None or parent not in by_id:
            roots.append(post.id)
        else:
            children[parent].append(post.id)

    trees = [ConversationTree(root=r, children=children) for r in roots]

    reached: set[str] = set()
    for tree in trees:
        reached.update(tree.nodes())
    if len(reached) != len(by_id):
        # Unreached nodes sit on a parent cycle; walk one to name it.
        start = next(pid for pid in by_id if pid not in reached)
        seen: list[str] = []
        node = start
        while node not in seen:
            seen.append(node)
            node = by_id[node].parent_id
        cycle = seen[seen.index(node):] + [node]
        raise CorpusError("reply cycle: " + " -> ".join(cycle))

    # Per-tree children maps, restricted to the tree's own nodes.
    out = []
    for tree in trees:
        nodes = set(tree.nodes())
        out.append(ConversationTree(
            root=tree.root,
            children={n: list(children[n]) for n in nodes},
        ))
    return out


def flatten_to_paths(
    tree: ConversationTree,
    tokens_by_id: Mapping[str, list[str]],
) -> list[ConversationInstance]:
    """Flatten a reply tree into its root-to-leaf conversation instances.

    Yields exactly one instance per leaf, in depth-first child order.
    """
    instances: list[ConversationInstance] = []
    stack: list[list[str]] = [[tree.root]]
    while stack:
        path = stack.pop()
        kids = tree.children.get(path[-1], [])
        if not kids:
            instances.append(ConversationInstance(
                ids=list(path),
                messages=[list(tokens_by_id[pid]) for pid in path],
            ))
        else:
            for kid in reversed(kids):
                stack.append(path + [kid])
    return instances


def normalize_tokens(text: str) -> list[str]:
    """Tokenize one post with the documented rule set.

    Rules: split on whitespace; pieces with an http(s) scheme prefix become
    URL; pieces starting with '#'/'@' (after detaching trailing punctuation)
    become HASH/MENT; leading and trailing ASCII punctuation runs are
    detached as their own tokens; remaining words are lower-cased.
    Punctuation is retained, not dropped.
    """
    if not isinstance(text, str):
        return []
    tokens: list[str] = []
    for piece in text.split():
        if piece.lower().startswith(_URL_PREFIXES):
            tokens.append(URL_TOKEN)
            continue
        if all(ch in _PUNCT for ch in piece):
            tokens.append(piece)
            continue
        trail = ""
        while piece[-1] in _PUNCT:
            trail = piece[-1] + trail
            piece = piece[:-1]
        lead = ""
        while piece[0] in _PUNCT and not (
            piece[0] in "#@" and len(piece) > 1 and piece[1] not in _PUNCT
        ):
            lead += piece[0]
            piece = piece[1:]
        if lead:
            tokens.append(lead)
        if piece.startswith("#") and len(piece) > 1:
            tokens.append(HASHTAG_TOKEN)
        elif piece.startswith("@") and len(piece) > 1:
            tokens.append(MENTION_TOKEN)
        elif piece:
            tokens.append(piece.lower())
        if trail:
            tokens.append(trail)
    return tokens


def is_punctuation(token: str) -> bool:
    return bool(token) and all(ch in _PUNCT for ch in token)


@dataclass
class Vocabulary:
    """Bijective word<->index map with counts and stop-word flags.

    Index order is deterministic: descending corpus count, ties broken
    lexicographically. Generic HASH/MENT/URL tags are ordinary entries.
    """

    words: list[str]
    counts: list[int]
    stop_flags: np.ndarray  # bool, shape (V,)
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise CorpusError("vocabulary words are not unique")
        self.stop_flags = np.asarray(self.stop_flags, dtype=bool)
        if self.stop_flags.shape != (len(self.words),):
            raise CorpusError("stop_flags length does not match word list")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index[word]

    def get(self, word: str) -> int | None:
        return self._index.get(word)

    def word(self, i: int) -> str:
        return self.words[i]

    def is_stop(self, i: int) -> bool:
        return bool(self.stop_flags[i])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for i, w in enumerate(self.words):
            h.update(f"{i}\t{w}\t{self.counts[i]}\t{int(self.stop_flags[i])}\n".encode("utf-8"))
        return h.hexdigest()

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.words):
                fh.write(f"{i}\t{w}\t{self.counts[i]}\t{int(self.stop_flags[i])}\n")

    @classmethod
    def from_tsv(cls, path: str | Path) -> "Vocabulary":
        words, counts, flags = [], [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, word, count, stop = line.split("\t")
                if int(idx) != len(words):
                    raise CorpusError(f"non-contiguous vocabulary index {idx}")
                words.append(word)
                counts.append(int(count))
                flags.append(bool(int(stop)))
        return cls(words=words, counts=counts, stop_flags=np.array(flags, dtype=bool))


def build_vocabulary(
    corpus: Sequence[ConversationInstance],
    min_count: int = 20,
    stop_list: Iterable[str] = (),
) -> Vocabulary:
    """Count words over the corpus and keep those with count >= min_count.

    Posts shared by several root-to-leaf paths are counted once (by post id),
    so bushy trees do not inflate counts. Punctuation tokens and stop_list
    entries are flagged as stop words but kept in the vocabulary.
    """
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")
    stop_set = set(stop_list)
    counter: Counter[str] = Counter()
    seen_ids: set[str] = set()
    for inst in corpus:
        for pid, tokens in zip(inst.ids, inst.messages):
            if pid in seen_ids:
                continue
            seen_ids.add(pid)
            counter.update(tokens)
    kept = [(w, c) for w, c in counter.items() if c >= min_count]
    kept.sort(key=lambda wc: (-wc[1], wc[0]))
    words = [w for w, _ in kept]
    counts = [c for _, c in kept]
    flags = np.array(
        [w in stop_set or is_punctuation(w) for w in words], dtype=bool
    )
    return Vocabulary(words=words, counts=counts, stop_flags=flags)


def vectorize(
    item: Sequence[str] | ConversationInstance,
    vocab: Vocabulary,
) -> np.ndarray:
    """Bag-of-words count vector; out-of-vocabulary tokens are ignored.

    For a ConversationInstance the vector is the element-wise sum of all
    its message vectors (the target message included).
    """
    vec = np.zeros(len(vocab), dtype=np.int64)
    if isinstance(item, ConversationInstance):
        for msg in item.messages:
            vec += vectorize(msg, vocab)
        return vec
    for token in item:
        idx = vocab.get(token)
        if idx is not None:
            vec[idx] += 1
    return vec


def split_dataset(
    instances: Sequence[ConversationInstance],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[ConversationInstance], list[ConversationInstance], list[ConversationInstance]]:
    """Disjoint train/dev/test partition at the conversation level.

    Reproducible given seed; sizes are floor(ratio * n) with the remainder
    going to the splits with the largest fractional parts.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must sum to 1, got {ratios}")
    n = len(instances)
    n_nonzero = sum(1 for r in ratios if r > 0)
    if n < n_nonzero:
        raise CorpusError(f"{n} instances cannot fill {n_nonzero} non-empty splits")
    raw = [r * n for r in ratios]
    sizes = [int(x) for x in raw]
    remainder = n - sum(sizes)
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    rng = np.random.default_rng(derive_seed(seed, "split"))
    perm = rng.permutation(n)
    bounds = np.cumsum([0] + sizes)
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        out.append([instances[i] for i in perm[lo:hi]])
    return out[0], out[1], out[2]


class BowDataset:
    """Vectorized (target message, conversation context) pairs.

    Counts are stored sparsely per message and densified per batch, so large
    corpora never materialize an n_messages x V matrix. Example i is the
    i-th message of the flattened instance list with its own conversation
    as context; by default the context includes the target message itself.
    """

    def __init__(
        self,
        instances: Sequence[ConversationInstance],
        vocab: Vocabulary,
        context_excludes_target: bool = False,
    ):
        self.vocab_size = len(vocab)
        self.context_excludes_target = context_excludes_target
        self.message_ids: list[str] = []
        self.conversation_index: list[int] = []
        self.tokens: list[list[str]] = []
        self._msg_idx: list[np.ndarray] = []
        self._msg_cnt: list[np.ndarray] = []
        self._conv_idx: list[np.ndarray] = []
        self._conv_cnt: list[np.ndarray] = []

        for ci, inst in enumerate(instances):
            conv_vec = vectorize(inst, vocab)
            nz = np.flatnonzero(conv_vec)
            self._conv_idx.append(nz)
            self._conv_cnt.append(conv_vec[nz])
            for pid, msg in zip(inst.ids, inst.messages):
                vec = vectorize(msg, vocab)
                nz = np.flatnonzero(vec)
                self._msg_idx.append(nz)
                self._msg_cnt.append(vec[nz])
                self.message_ids.append(pid)
                self.conversation_index.append(ci)
                self.tokens.append(list(msg))

    def __len__(self) -> int:
        return len(self.message_ids)

    @property
    def n_conversations(self) -> int:
        return len(self._conv_idx)

    def dense_batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Return (x_bow, c_bow) float32 matrices for the given examples."""
        x = np.zeros((len(indices), self.vocab_size), dtype=np.float32)
        c = np.zeros((len(indices), self.vocab_size), dtype=np.float32)
        for row, i in enumerate(indices):
            x[row, self._msg_idx[i]] = self._msg_cnt[i]
            ci = self.conversation_index[i]
            c[row, self._conv_idx[ci]] = self._conv_cnt[ci]
            if self.context_excludes_target:
                c[row, self._msg_idx[i]] -= self._msg_cnt[i]
        return x, c


# ---------------------------------------------------------------------------
# File formats: posts and instances as JSON lines, vocabulary as TSV.
# ---------------------------------------------------------------------------

def read_posts_jsonl(path: str | Path) -> list[RawPost]:
    posts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj or "text" not in obj:
                raise CorpusError(f"{path}:{lineno}: post needs 'id' and 'text' fields")
            posts.append(RawPost(
                id=str(obj["id"]),
                parent_id=None if obj.get("parent_id") is None else str(obj["parent_id"]),
                text=obj.get("text") or "",
                label=obj.get("label"),
            ))
    return posts


def write_instances_jsonl(instances: Sequence[ConversationInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({"ids": inst.ids, "messages": inst.messages}) + "\n")


def read_instances_jsonl(path: str | Path) -> list[ConversationInstance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            instances.append(ConversationInstance(ids=obj["ids"], messages=obj["messages"]))
    return instances


def read_stop_list(path: str | Path) -> set[str]:
    """One stop word per line; blank lines and '#' comments ignored."""
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            word = line.strip()
            if word and not word.startswith("#"):
                out.add(word)
    return out
