"""Command-line entry point.

Commands: preprocess, train, grid, eval-topics, eval-disc, classify,
export-top-words, attribute. Options resolve in layers: built-in defaults,
then a flat `key = value` config file, then command-line flags. Every run
writes a resolved-config snapshot beside its outputs. Exit status: 0 on
success, 1 on runtime failure (one machine-parsable line on stderr), 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as cp
from . import downstream as ds
from . import evaluation as ev
from .model import ModelConfig
from .objectives import LossBreakdown
from .synthetic import generate_corpus, make_planted_model, write_fixture_posts
from .trainer import TrainConfig, grid_search, load_checkpoint, save_checkpoint, train


class UsageError(Exception):
    pass


# Layered options: name -> (python type, default). Config files may set any
# of these; flags always win. Paths and the command itself are flag-only.
OPTION_SPECS: dict[str, tuple[type, object]] = {
    "topics": (int, 50),
    "discourse": (int, 10),
    "topic_hidden": (int, 200),
    "disc_hidden": (int, 100),
    "tau": (float, 0.5),
    "lambda": (float, 0.01),
    "stop_penalty": (float, 5.0),
    "lr": (float, 1e-3),
    "batch_size": (int, 64),
    "epochs": (int, 100),
    "patience": (int, 5),
    "seed": (int, 1),
    "min_count": (int, 20),
    "top_n": (int, 10),
    "top_k": (int, 50),
    "window": (int, 10),
    "ratios": (str, "0.8,0.1,0.1"),
    "mi_marginal": (str, "batch"),
    "mi_warmup": (int, 0),
    "grad_clip": (float, 5.0),
    "no_grad_clip": (bool, False),
    "context_excludes_target": (bool, False),
    "exclude_stop": (bool, False),
    "joint_epochs": (int, 10),
    "model_loss_weight": (float, 1.0),
}


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def read_config_file(path: str | Path) -> dict:
    """Flat `key = value` file; '#' starts a comment; unknown keys rejected."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in OPTION_SPECS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            typ, _ = OPTION_SPECS[key]
            try:
                out[key] = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve_options(args: argparse.Namespace) -> dict:
    """defaults < config file < flags; returns one value per known option."""
    resolved = {k: default for k, (_, default) in OPTION_SPECS.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        resolved.update(read_config_file(config_path))
    for key in OPTION_SPECS:
        value = vars(args).get(key)
        if value is not None:
            resolved[key] = value
    return resolved


def write_snapshot(resolved: dict, args: argparse.Namespace, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.txt", "w", encoding="utf-8") as fh:
        fh.write(f"command = {args.command}\n")
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")


def _model_config(opts: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        n_topics=opts["topics"], n_roles=opts["discourse"], vocab_size=vocab_size,
        topic_hidden=opts["topic_hidden"], disc_hidden=opts["disc_hidden"],
        tau=opts["tau"], lambda_mi=opts["lambda"], stop_penalty=opts["stop_penalty"],
    )


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=opts["lr"], batch_size=opts["batch_size"],
        max_epochs=opts["epochs"], patience=opts["patience"], seed=opts["seed"],
        grad_clip=opts["grad_clip"], clip_gradients=not opts["no_grad_clip"],
        mi_marginal=opts["mi_marginal"], mi_warmup_epochs=opts["mi_warmup"],
    )


def _parse_ratios(raw: str) -> tuple[float, float, float]:
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != 3:
        raise UsageError(f"ratios must have 3 comma-separated values, got {raw!r}")
    return parts[0], parts[1], parts[2]


def _instances_from_posts(posts: list[cp.RawPost]) -> list[cp.ConversationInstance]:
    tokens_by_id = {p.id: cp.normalize_tokens(p.text) for p in posts}
    instances = []
    for tree in cp.build_trees(posts):
        instances.extend(cp.flatten_to_paths(tree, tokens_by_id))
    return instances


def _load_model(args, opts):
    vocab = cp.Vocabulary.from_tsv(args.vocab)
    model, config, _ = load_checkpoint(args.ckpt,
                                       expected_vocab_hash=vocab.content_hash())
    return model, config, vocab


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------

def cmd_preprocess(args, opts) -> int:
    posts = cp.read_posts_jsonl(args.input)
    if not posts:
        raise ValueError("empty corpus: no posts in input")
    instances = _instances_from_posts(posts)
    stop_list = cp.read_stop_list(args.stop_list) if args.stop_list else set()
    vocab = cp.build_vocabulary(instances, min_count=opts["min_count"],
                                stop_list=stop_list)
    train_split, dev_split, test_split = cp.split_dataset(
        instances, _parse_ratios(opts["ratios"]), seed=opts["seed"])
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.to_tsv(out_dir / "vocab.tsv")
    cp.write_instances_jsonl(train_split, out_dir / "train.jsonl")
    cp.write_instances_jsonl(dev_split, out_dir / "dev.jsonl")
    cp.write_instances_jsonl(test_split, out_dir / "test.jsonl")
    write_snapshot(opts, args, out_dir)
    print(f"preprocess: {len(posts)} posts -> {len(instances)} instances, "
          f"vocab {len(vocab)}, splits {len(train_split)}/{len(dev_split)}/{len(test_split)}")
    return 0


def _load_splits(data_dir: str | Path, opts):
    data_dir = Path(data_dir)
    vocab = cp.Vocabulary.from_tsv(data_dir / "vocab.tsv")
    train_inst = cp.read_instances_jsonl(data_dir / "train.jsonl")
    dev_inst = cp.read_instances_jsonl(data_dir / "dev.jsonl")
    if not train_inst or not dev_inst:
        raise ValueError("empty corpus: train or dev split has no instances")
    excl = opts["context_excludes_target"]
    return (vocab,
            cp.BowDataset(train_inst, vocab, context_excludes_target=excl),
            cp.BowDataset(dev_inst, vocab, context_excludes_target=excl))


def cmd_train(args, opts) -> int:
    vocab, train_set, dev_set = _load_splits(args.data_dir, opts)
    if len(vocab) == 0:
        raise ValueError("empty corpus: vocabulary has no entries")
    model, history = train(train_set, dev_set, _model_config(opts, len(vocab)),
                           _train_config(opts), stop_flags=vocab.stop_flags)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, vocab_hash=vocab.content_hash())
    history.to_csv(out.with_suffix(".history.csv"))
    write_snapshot(opts, args, out.parent)
    if history.epochs and history.best_epoch >= 1:
        best = history.epochs[history.best_epoch - 1]
        print(f"train: {len(history.epochs)} epochs, best epoch "
              f"{history.best_epoch} (dev objective {best.dev.total:.4f})")
    else:
        print("train: no epochs run")
    if history.diverged:
        print("train: diverged; kept last finite best checkpoint", file=sys.stderr)
    return 0


def _parse_grid(raw: str) -> dict[str, list]:
    grid = {}
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad grid cell {part!r}, expected name=v1,v2,...")
        key, values = part.split("=", 1)
        parsed = []
        for v in values.split(","):
            v = v.strip()
            try:
                parsed.append(int(v))
            except ValueError:
                try:
                    parsed.append(float(v))
                except ValueError:
                    parsed.append(v)
        grid[key.strip()] = parsed
    if not grid:
        raise UsageError("empty grid")
    return grid


def cmd_grid(args, opts) -> int:
    vocab, train_set, dev_set = _load_splits(args.data_dir, opts)
    grid = _parse_grid(args.grid)
    result = grid_search(train_set, dev_set, _model_config(opts, len(vocab)),
                         _train_config(opts), grid, stop_flags=vocab.stop_flags)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.to_csv(out_dir / "grid.csv")
    save_checkpoint(result.best_model, out_dir / "best.ckpt",
                    vocab_hash=vocab.content_hash())
    result.best_history.to_csv(out_dir / "best.history.csv")
    write_snapshot(opts, args, out_dir)
    print(f"grid: {len(result.cells)} cells, best {result.best.overrides} "
          f"(dev objective {result.best.dev_total:.4f})")
    return 0


def cmd_eval_topics(args, opts) -> int:
    model, config, vocab = _load_model(args, opts)
    reference = [msg for inst in cp.read_instances_jsonl(args.ref)
                 for msg in inst.messages]
    topic_matrix = model.topic_word_matrix().numpy()
    report: dict = {"n_topics": config.n_topics, "window": opts["window"]}
    summaries = {}
    for n in (5, 10, opts["top_n"]):
        summaries[n] = ev.top_n_words(topic_matrix, vocab, n,
                                      exclude_stop=opts["exclude_stop"])
    for n in (5, 10):
        coh = ev.npmi_coherence(summaries[n].words, reference, window=opts["window"])
        report[f"npmi_n{n}"] = coh.mean
        report[f"npmi_n{n}_per_topic"] = coh.per_topic
        report[f"npmi_n{n}_skipped_pairs"] = coh.skipped_pairs
    report["npmi_mean_n5_n10"] = (report["npmi_n5"] + report["npmi_n10"]) / 2
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "topic_coherence.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
    summary = summaries[opts["top_n"]]
    with open(out_dir / "topic_words.tsv", "w", encoding="utf-8") as fh:
        for k, words in enumerate(summary.words):
            fh.write("\t".join(["topic", str(k)] + words) + "\n")
    write_snapshot(opts, args, out_dir)
    print(f"eval-topics: NPMI n5 {report['npmi_n5']:.4f}, n10 {report['npmi_n10']:.4f}")
    return 0


def cmd_eval_disc(args, opts) -> int:
    model, config, vocab = _load_model(args, opts)
    posts = cp.read_posts_jsonl(args.labeled)
    labels_by_id = {p.id: p.label for p in posts if p.label is not None}
    if not labels_by_id:
        raise ValueError("no labeled posts in input")
    instances = _instances_from_posts(posts)
    dataset = cp.BowDataset(instances, vocab,
                            context_excludes_target=opts["context_excludes_target"])
    assignments, labels, seen = [], [], set()
    for start in range(0, len(dataset), 512):
        idx = list(range(start, min(start + 512, len(dataset))))
        x, c = dataset.dense_batch(idx)
        _, _, d_hard = model.infer(torch.from_numpy(x), torch.from_numpy(c))
        roles = d_hard.argmax(dim=-1).numpy()
        for row, i in enumerate(idx):
            mid = dataset.message_ids[i]
            if mid in seen or mid not in labels_by_id:
                continue
            seen.add(mid)
            assignments.append(int(roles[row]))
            labels.append(labels_by_id[mid])
    report = {
        "n_messages": len(labels),
        "n_roles": config.n_roles,
        "purity": ev.purity(assignments, labels),
        "homogeneity": ev.homogeneity(assignments, labels),
        "variation_of_information": ev.variation_of_information(assignments, labels),
    }
    heatmap = ev.alignment_matrix(assignments, labels, n_roles=config.n_roles)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "discourse_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
    with open(out_dir / "alignment_heatmap.csv", "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"role{r}" for r in range(config.n_roles)) + "\n")
        for label, row in zip(heatmap.row_labels, heatmap.matrix):
            fh.write(str(label) + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
    write_snapshot(opts, args, out_dir)
    print(f"eval-disc: purity {report['purity']:.4f}, "
          f"homogeneity {report['homogeneity']:.4f}, "
          f"VI {report['variation_of_information']:.4f}")
    return 0


def cmd_classify(args, opts) -> int:
    model, config, vocab = _load_model(args, opts)
    posts = cp.read_posts_jsonl(args.labeled)
    merge_map = {}
    if args.merge_map:
        with open(args.merge_map, encoding="utf-8") as fh:
            merge_map = json.load(fh)
    block_list = cp.read_stop_list(args.block_list) if args.block_list else set()
    classified = ds.build_hashtag_labels(posts, merge_map=merge_map,
                                         block_list=block_list, top_k=opts["top_k"])
    if classified.n_classes < 2:
        raise ValueError("classification needs at least 2 hashtag classes")
    labels_by_id = classified.labels_by_id()
    seed = opts["seed"]
    excl = opts["context_excludes_target"]

    if args.mode == "features":
        instances = _instances_from_posts(posts)
        dataset = cp.BowDataset(instances, vocab, context_excludes_target=excl)
        labeled = ds.select_labeled(dataset, labels_by_id, vocab, classified.n_classes)
        features = ds.extract_feature_matrix(dataset, model, labeled.indices)
        result = ds.train_classifier(features, labeled.labels, seed=seed)
        metrics = {"mode": "features", "accuracy": result.accuracy,
                   "macro_f1": result.macro_f1, "n_train": result.n_train,
                   "n_test": result.n_test, "n_classes": classified.n_classes}
        preds = result.classifier.predict(features)
        f1s = ds.per_class_f1(labeled.labels, preds, classified.n_classes)
    else:
        instances = _instances_from_posts(posts)
        tr, dev, te = cp.split_dataset(instances, seed=seed)
        bow_tr = cp.BowDataset(tr, vocab, context_excludes_target=excl)
        bow_dev = cp.BowDataset(dev, vocab, context_excludes_target=excl)
        bow_te = cp.BowDataset(te, vocab, context_excludes_target=excl)
        lm_tr = ds.select_labeled(bow_tr, labels_by_id, vocab, classified.n_classes)
        lm_te = ds.select_labeled(bow_te, labels_by_id, vocab, classified.n_classes)
        if len(lm_tr.labels) == 0 or len(lm_te.labels) == 0:
            raise ValueError("labeled split is empty; corpus too small for joint training")
        joint_cfg = ds.JointConfig(epochs=opts["joint_epochs"],
                                   learning_rate=opts["lr"],
                                   batch_size=opts["batch_size"],
                                   model_loss_weight=opts["model_loss_weight"])
        train_cfg = _train_config(opts)
        if args.mode == "joint":
            # fine-tune a copy of the loaded checkpoint jointly with the CNN
            tuned = copy.deepcopy(model)
            run = ds.train_text_classifier(lm_tr, lm_te, tuned, joint_cfg, seed=seed,
                                           update_model=True,
                                           stop_flags=vocab.stop_flags)
        else:  # separate
            pretrained, _ = train(bow_tr, bow_dev, _model_config(opts, len(vocab)),
                                  train_cfg, stop_flags=vocab.stop_flags)
            run = ds.train_text_classifier(lm_tr, lm_te, pretrained, joint_cfg,
                                           seed=seed, update_model=False,
                                           stop_flags=vocab.stop_flags)
        metrics = {"mode": args.mode, "accuracy": run.accuracy,
                   "macro_f1": run.macro_f1, "n_train": len(lm_tr.labels),
                   "n_test": len(lm_te.labels), "n_classes": classified.n_classes}
        f1s = ds.per_class_f1(run.y_true, run.y_pred, classified.n_classes)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "classification_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
    with open(out_dir / "per_class_f1.csv", "w", encoding="utf-8") as fh:
        fh.write("class,hashtag,f1\n")
        for c, name in enumerate(classified.label_names):
            fh.write(f"{c},{name},{f1s[c]:.6f}\n")
    write_snapshot(opts, args, out_dir)
    print(f"classify[{args.mode}]: accuracy {metrics['accuracy']:.4f}, "
          f"macro F1 {metrics['macro_f1']:.4f}")
    return 0


def cmd_export_top_words(args, opts) -> int:
    model, config, vocab = _load_model(args, opts)
    n = opts["top_n"]
    topics = ev.top_n_words(model.topic_word_matrix().numpy(), vocab, n,
                            exclude_stop=opts["exclude_stop"])
    roles = ev.top_n_words(model.discourse_word_matrix().numpy(), vocab, n,
                           exclude_stop=opts["exclude_stop"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "top_words.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        for k, words in enumerate(topics.words):
            fh.write("\t".join(["topic", str(k)] + words) + "\n")
        for d, words in enumerate(roles.words):
            fh.write("\t".join(["discourse", str(d)] + words) + "\n")
    write_snapshot(opts, args, out_dir)
    print(f"export-top-words: wrote {config.n_topics + config.n_roles} rows to {path}")
    return 0


def cmd_attribute(args, opts) -> int:
    model, config, vocab = _load_model(args, opts)
    instances = cp.read_instances_jsonl(args.input)
    dataset = cp.BowDataset(instances, vocab,
                            context_excludes_target=opts["context_excludes_target"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_written = 0
    with open(out_dir / "attributions.jsonl", "w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            x, c = dataset.dense_batch([i])
            theta, _, d_hard = model.infer(torch.from_numpy(x[0]), torch.from_numpy(c[0]))
            attr = ev.word_attribution(dataset.tokens[i], theta, d_hard, model, vocab)
            fh.write(json.dumps({
                "id": dataset.message_ids[i],
                "words": [{"token": a.token, "tag": a.tag,
                           "p_topic": a.p_topic, "p_discourse": a.p_discourse}
                          for a in attr],
            }) + "\n")
            n_written += 1
    write_snapshot(opts, args, out_dir)
    print(f"attribute: wrote {n_written} messages")
    return 0


def cmd_make_fixture(args, opts) -> int:
    """Generate a small synthetic posts file for smoke testing the pipeline."""
    planted = make_planted_model(n_topics=opts["topics"], n_roles=opts["discourse"],
                                 vocab_size=args.vocab_size)
    corpus = generate_corpus(planted, n_conversations=args.conversations,
                             seed=opts["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fixture_posts(corpus, out, hashtag_by_topic=True)
    print(f"make-fixture: wrote {sum(len(i) for i in corpus.instances)} posts to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)


def _add_hyper(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topics", type=int)
    p.add_argument("--discourse", type=int)
    p.add_argument("--topic-hidden", type=int)
    p.add_argument("--disc-hidden", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", type=float)
    p.add_argument("--stop-penalty", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--mi-marginal", choices=["batch", "uniform"])
    p.add_argument("--mi-warmup", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--no-grad-clip", action="store_true", default=None)
    p.add_argument("--context-excludes-target", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convodisc",
        description="Joint neural modeling of conversation topics and discourse roles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="posts JSONL -> instances, vocab, splits")
    p.add_argument("--input", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--min-count", type=int)
    p.add_argument("--stop-list")
    p.add_argument("--ratios")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the model on preprocessed splits")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    _add_hyper(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over hyperparameters")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--grid", required=True,
                   help="e.g. 'lambda_mi=0.001,0.01,0.1;learning_rate=1e-3,5e-4'")
    _add_hyper(p)
    _add_common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval-topics", help="NPMI topic coherence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ref", required=True, help="reference instances JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--top-n", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--exclude-stop", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_topics)

    p = sub.add_parser("eval-disc", help="discourse roles vs gold dialogue acts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--labeled", required=True, help="labeled posts JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--context-excludes-target", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_disc)

    p = sub.add_parser("classify", help="hashtag-proxy message classification")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--labeled", required=True, help="raw posts JSONL with hashtags")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["features", "joint", "separate"],
                   default="features")
    p.add_argument("--merge-map", help="JSON file mapping hashtag -> canonical tag")
    p.add_argument("--block-list", help="file of non-topical hashtags to drop")
    p.add_argument("--top-k", type=int)
    p.add_argument("--joint-epochs", type=int)
    p.add_argument("--model-loss-weight", type=float)
    _add_hyper(p)
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("export-top-words", help="top words per topic and role")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--top-n", type=int)
    p.add_argument("--exclude-stop", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_export_top_words)

    p = sub.add_parser("attribute", help="per-word topic/discourse attribution")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True, help="instances JSONL")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--context-excludes-target", action="store_true", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("make-fixture", help="write a synthetic posts file")
    p.add_argument("--out", required=True)
    p.add_argument("--conversations", type=int, default=100)
    p.add_argument("--vocab-size", type=int, default=120)
    p.add_argument("--topics", type=int)
    p.add_argument("--discourse", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_make_fixture)

    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("CONVO_TD_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: CONVO_TD_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve_options(args)
        return args.func(args, opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
