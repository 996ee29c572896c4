"""Mini-batch training loop: Adam updates, early stopping on the development
objective, binary checkpoints, and exhaustive grid search."""

from __future__ import annotations

import itertools
import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import BowDataset
from .model import ModelConfig, TopicDiscourseModel, gumbel_noise
from .objectives import LossBreakdown, NonFiniteLossError, total_loss
from .seeding import derive_seed

EVAL_BATCH = 512


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or shape-incompatible checkpoint file."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    grad_clip: float = 5.0
    clip_gradients: bool = True
    mi_marginal: str = "batch"
    # KL-annealing style warm-up: the MI penalty weight is 0 for the first
    # `mi_warmup_epochs` epochs, then jumps to the configured lambda.
    mi_warmup_epochs: int = 0
    grid: Optional[dict[str, list]] = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be > 0, got {self.batch_size}")
        if self.max_epochs <= 0:
            raise ValueError(f"max_epochs must be > 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    dev: LossBreakdown
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    diverged: bool = False

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,l_z,l_d,l_x,l_mi,total,dev_total\n")
            for rec in self.epochs:
                t = rec.train
                fh.write(f"{rec.epoch},{t.l_z:.6f},{t.l_d:.6f},{t.l_x:.6f},"
                         f"{t.l_mi:.6f},{t.total:.6f},{rec.dev.total:.6f}\n")


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    rng = np.random.default_rng([derive_seed(seed, "shuffle"), epoch])
    return rng.permutation(n)


def evaluate_objective(
    model: TopicDiscourseModel,
    dataset: BowDataset,
    stop_flags: Optional[np.ndarray] = None,
    mi_marginal: str = "batch",
) -> LossBreakdown:
    """Mean objective over a dataset with deterministic latents (no noise)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    flags = None if stop_flags is None else torch.as_tensor(stop_flags, dtype=torch.bool)
    sums = {"l_z": 0.0, "l_d": 0.0, "l_x": 0.0, "l_mi": 0.0, "total": 0.0}
    model.eval()
    with torch.no_grad():
        for start in range(0, n, EVAL_BATCH):
            idx = range(start, min(start + EVAL_BATCH, n))
            x, c = dataset.dense_batch(idx)
            _, _, breakdown = total_loss(
                torch.from_numpy(x), torch.from_numpy(c), model,
                stop_flags=flags, deterministic=True, mi_marginal=mi_marginal,
            )
            w = len(idx)
            for key, value in breakdown.to_dict().items():
                sums[key] += value * w
    return LossBreakdown(**{k: v / n for k, v in sums.items()})


def train(
    train_set: BowDataset,
    dev_set: BowDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    stop_flags: Optional[np.ndarray] = None,
) -> tuple[TopicDiscourseModel, TrainHistory]:
    """Train to the best development objective.

    Stops early after `patience` epochs without dev improvement, restores the
    best parameters, and aborts (keeping the last finite best snapshot) if
    any loss term goes non-finite. Fully reproducible given the seed.
    """
    train_config.validate()
    model_config.validate()
    if len(train_set) == 0:
        raise ValueError("empty corpus: no training examples")
    if len(dev_set) == 0:
        raise ValueError("empty corpus: no development examples")

    model = TopicDiscourseModel(model_config, seed=train_config.seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.learning_rate,
        betas=(0.9, 0.999), eps=1e-8,
    )
    noise_gen = torch.Generator().manual_seed(derive_seed(train_config.seed, "noise"))
    flags = None if stop_flags is None else torch.as_tensor(stop_flags, dtype=torch.bool)

    history = TrainHistory()
    best_total = -np.inf
    best_state: Optional[dict] = None
    epochs_since_best = 0
    n = len(train_set)

    for epoch in range(1, train_config.max_epochs + 1):
        tic = time.perf_counter()
        perm = _epoch_permutation(train_config.seed, epoch, n)
        model.train()
        effective_lambda = (0.0 if epoch <= train_config.mi_warmup_epochs
                            else model_config.lambda_mi)
        sums = {"l_z": 0.0, "l_d": 0.0, "l_x": 0.0, "l_mi": 0.0, "total": 0.0}
        try:
            for start in range(0, n, train_config.batch_size):
                idx = perm[start:start + train_config.batch_size]
                x, c = train_set.dense_batch(idx)
                optimizer.zero_grad()
                objective, mi_fit, breakdown = total_loss(
                    torch.from_numpy(x), torch.from_numpy(c), model,
                    stop_flags=flags, generator=noise_gen,
                    mi_marginal=train_config.mi_marginal,
                    lambda_mi=effective_lambda,
                )
                (-objective + mi_fit).backward()
                if train_config.clip_gradients:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
                optimizer.step()
                for key, value in breakdown.to_dict().items():
                    sums[key] += value * len(idx)
            train_breakdown = LossBreakdown(**{k: v / n for k, v in sums.items()})
            dev_breakdown = evaluate_objective(model, dev_set, stop_flags,
                                               train_config.mi_marginal)
        except NonFiniteLossError:
            history.diverged = True
            break
        history.epochs.append(EpochRecord(
            epoch=epoch, train=train_breakdown, dev=dev_breakdown,
            wall_time=time.perf_counter() - tic,
        ))
        if dev_breakdown.total > best_total:
            best_total = dev_breakdown.total
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_config.patience:
                history.stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


@dataclass
class GridCell:
    overrides: dict
    dev_total: float
    best_epoch: int


@dataclass
class GridSearchResult:
    cells: list[GridCell]
    best: GridCell
    best_model: TopicDiscourseModel
    best_history: TrainHistory

    def to_csv(self, path: str | Path) -> None:
        keys = sorted({k for cell in self.cells for k in cell.overrides})
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(keys + ["dev_total", "best_epoch"]) + "\n")
            for cell in self.cells:
                row = [repr(cell.overrides[k]) for k in keys]
                fh.write(",".join(row + [f"{cell.dev_total:.6f}", str(cell.best_epoch)]) + "\n")


def _apply_overrides(
    model_config: ModelConfig, train_config: TrainConfig, overrides: dict
) -> tuple[ModelConfig, TrainConfig]:
    mc, tc = model_config, train_config
    for key, value in overrides.items():
        if hasattr(mc, key):
            mc = replace(mc, **{key: value})
        elif hasattr(tc, key):
            tc = replace(tc, **{key: value})
        else:
            raise ValueError(f"unknown grid hyperparameter: {key}")
    return mc, tc


def grid_search(
    train_set: BowDataset,
    dev_set: BowDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid: dict[str, Sequence],
    stop_flags: Optional[np.ndarray] = None,
) -> GridSearchResult:
    """Exhaustive product over the grid, selecting by dev objective.

    Every cell trains from scratch with the same base seed; ties keep the
    first cell in product order.
    """
    if not grid:
        raise ValueError("grid must be non-empty")
    keys = list(grid.keys())
    cells: list[GridCell] = []
    best_cell = None
    best_model = None
    best_history = None
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        mc, tc = _apply_overrides(model_config, train_config, overrides)
        model, history = train(train_set, dev_set, mc, tc, stop_flags)
        dev_total = history.epochs[history.best_epoch - 1].dev.total if history.epochs else -np.inf
        cell = GridCell(overrides=overrides, dev_total=dev_total,
                        best_epoch=history.best_epoch)
        cells.append(cell)
        if best_cell is None or cell.dev_total > best_cell.dev_total:
            best_cell, best_model, best_history = cell, model, history
    return GridSearchResult(cells=cells, best=best_cell,
                            best_model=best_model, best_history=best_history)


# ---------------------------------------------------------------------------
# Checkpoint container: magic, JSON header (config, vocab hash, tensor names /
# shapes / byte offsets), then row-major float32 payload.
# ---------------------------------------------------------------------------

_MAGIC = b"CVTD1\n"


def save_checkpoint(
    model: TopicDiscourseModel,
    path: str | Path,
    vocab_hash: Optional[str] = None,
) -> None:
    entries = []
    buffers = []
    offset = 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().to(torch.float32).contiguous().numpy().tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        buffers.append(data)
        offset += len(data)
    header = json.dumps({
        "config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
        "dtype": "float32",
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(
    path: str | Path,
    expected_config: Optional[ModelConfig] = None,
    expected_vocab_hash: Optional[str] = None,
) -> tuple[TopicDiscourseModel, ModelConfig, Optional[str]]:
    """Rebuild a model from a checkpoint, verifying shapes against the config.

    If `expected_config` or `expected_vocab_hash` is given, mismatches are
    rejected with the offending tensor or field named.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CheckpointError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_raw = fh.read(header_len)
        if len(header_raw) != header_len:
            raise CheckpointError(f"{path}: truncated JSON header")
        header = json.loads(header_raw)
        payload_start = len(_MAGIC) + 8 + header_len
        config = ModelConfig.from_dict(header["config"])
        vocab_hash = header.get("vocab_hash")

        if expected_config is not None and expected_config.to_dict() != config.to_dict():
            expected_shapes = {
                name: list(t.shape)
                for name, t in TopicDiscourseModel(expected_config).state_dict().items()
            }
            for entry in header["tensors"]:
                want = expected_shapes.get(entry["name"])
                if want != entry["shape"]:
                    raise CheckpointError(
                        f"{path}: tensor {entry['name']} has shape {entry['shape']}, "
                        f"expected {want} for the current config"
                    )
            raise CheckpointError(f"{path}: checkpoint config does not match the current config")
        if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
            raise CheckpointError(
                f"{path}: vocabulary hash {vocab_hash} does not match expected {expected_vocab_hash}"
            )

        model = TopicDiscourseModel(config, seed=0)
        state = model.state_dict()
        new_state = {}
        for entry in header["tensors"]:
            name = entry["name"]
            if name not in state:
                raise CheckpointError(f"{path}: unexpected tensor {name}")
            if list(state[name].shape) != entry["shape"]:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {entry['shape']}, "
                    f"expected {list(state[name].shape)}"
                )
            fh.seek(payload_start + entry["offset"])
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(
                    f"{path}: truncated payload for {name} at offset "
                    f"{payload_start + entry['offset']}: wanted {entry['nbytes']} bytes, "
                    f"got {len(raw)}"
                )
            arr = np.frombuffer(raw, dtype=np.float32).reshape(entry["shape"]).copy()
            new_state[name] = torch.from_numpy(arr)
        missing = set(state) - set(new_state)
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        model.load_state_dict(new_state)
        model.eval()
    return model, config, vocab_hash
