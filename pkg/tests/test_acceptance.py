"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
The planted-corpus criteria share one generated corpus and one training run
where the criteria allow it; every tolerance is asserted exactly as stated.
"""

import copy
import itertools
import math
import time

import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.stats import norm

from convodisc import trainer as trainer_module
from convodisc.corpus import BowDataset, build_trees, flatten_to_paths, split_dataset
from convodisc.downstream import select_labeled, train_classifier
from convodisc.evaluation import (
    align_clusters,
    homogeneity,
    purity,
    variation_of_information,
)
from convodisc.model import ModelConfig, TopicDiscourseModel
from convodisc.objectives import LossBreakdown, categorical_kld, gaussian_kld
from convodisc.synthetic import generate_corpus, make_planted_model
from convodisc.trainer import TrainConfig, load_checkpoint, save_checkpoint, train

from conftest import finite_difference_gradients, make_gradient_check_setup
from test_corpus import _post
from test_evaluation import brute_homogeneity, brute_purity, brute_vi

RECOVERY_SEED = 0
RECOVERY_TRAIN = dict(learning_rate=1e-3, batch_size=64, max_epochs=100, patience=10)
MI_SEEDS = (0, 1, 2)
DOWNSTREAM_SEEDS = (0, 1, 2)


def _report(number: int, description: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number}: {status} - {description}{suffix}")


# ---------------------------------------------------------------------------
# Shared planted corpus and the single recovery training run (criteria 4, 7, 8).
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def planted_setup():
    planted = make_planted_model(n_topics=5, n_roles=4, vocab_size=200)
    corpus = generate_corpus(planted, n_conversations=2000,
                             messages_per_conversation=4,
                             tokens_per_message=12, seed=RECOVERY_SEED)
    train_inst, dev_inst, test_inst = split_dataset(corpus.instances,
                                                    seed=RECOVERY_SEED)
    return dict(
        planted=planted,
        corpus=corpus,
        train_set=BowDataset(train_inst, corpus.vocab),
        dev_set=BowDataset(dev_inst, corpus.vocab),
    )


@pytest.fixture(scope="module")
def recovery_run(planted_setup):
    config = ModelConfig(n_topics=5, n_roles=4, vocab_size=200)
    tic = time.time()
    model, history = train(planted_setup["train_set"], planted_setup["dev_set"],
                           config, TrainConfig(seed=RECOVERY_SEED, **RECOVERY_TRAIN))
    return dict(model=model, history=history, seconds=time.time() - tic)


class TestCriterion1DivergenceOracles:
    def test_divergence_oracles(self):
        ok = False
        tic = time.time()
        try:
            rng = np.random.default_rng(101)
            for _ in range(100):
                mu = rng.uniform(-3, 3)
                log_sigma = rng.uniform(-1.5, 1.5)
                sigma = math.exp(log_sigma)

                def integrand(x):
                    return norm.pdf(x, mu, sigma) * (
                        norm.logpdf(x, mu, sigma) - norm.logpdf(x, 0.0, 1.0))

                oracle, _ = integrate.quad(integrand, mu - 12 * sigma,
                                           mu + 12 * sigma, limit=200)
                ours = float(gaussian_kld(torch.tensor([mu]),
                                          torch.tensor([log_sigma])))
                assert abs(ours - oracle) < 1e-6

            for _ in range(100):
                q = rng.dirichlet(np.ones(6))
                p = rng.dirichlet(np.ones(6)) + 1e-3
                p /= p.sum()
                direct = sum(qi * math.log(qi / pi)
                             for qi, pi in zip(q, p) if qi > 0)
                ours = float(categorical_kld(torch.tensor(q), torch.tensor(p)))
                assert abs(ours - direct) < 1e-9

            elapsed = time.time() - tic
            assert elapsed < 5.0, f"took {elapsed:.1f}s"
            ok = True
        finally:
            _report(1, "divergence oracles (quadrature 1e-6, direct sum 1e-9, < 5 s)",
                    ok, f"{time.time() - tic:.1f}s")


class TestCriterion2GradientCorrectness:
    def test_gradient_check(self):
        ok = False
        tic = time.time()
        try:
            model, inputs = make_gradient_check_setup(
                vocab_size=30, n_topics=3, n_roles=2, batch=4)
            errors = finite_difference_gradients(model, inputs)
            assert "mi_head.weight" in errors and "mi_head.bias" in errors
            worst_name = max(errors, key=errors.get)
            assert errors[worst_name] < 1e-4, f"{worst_name}: {errors[worst_name]}"
            elapsed = time.time() - tic
            assert elapsed < 30.0, f"took {elapsed:.1f}s"
            ok = True
        finally:
            _report(2, "gradient vs central finite differences, rel err < 1e-4, "
                       "every parameter group incl. MI head, < 30 s",
                    ok, f"{time.time() - tic:.1f}s")


class TestCriterion3GumbelSoftmaxLaw:
    def test_argmax_frequency_matches_pi(self):
        ok = False
        tic = time.time()
        try:
            model = TopicDiscourseModel(
                ModelConfig(n_topics=3, n_roles=5, vocab_size=10, tau=0.5), seed=0)
            pi = torch.tensor([0.05, 0.10, 0.20, 0.25, 0.40])
            gen = torch.Generator().manual_seed(303)
            draws = model.sample_discourse(pi.expand(20_000, 5), generator=gen)
            freq = torch.bincount(draws.argmax(dim=-1), minlength=5).double() / 20_000
            worst = float((freq - pi).abs().max())
            assert worst <= 0.02, f"max deviation {worst:.4f}"
            elapsed = time.time() - tic
            assert elapsed < 5.0, f"took {elapsed:.1f}s"
            ok = True
        finally:
            _report(3, "Gumbel-softmax argmax law, D=5, 20k draws, +/-0.02, < 5 s",
                    ok, f"{time.time() - tic:.1f}s")


class TestCriterion4PlantedRecovery:
    def test_planted_recovery(self, planted_setup, recovery_run):
        ok = False
        detail = ""
        try:
            planted = planted_setup["planted"]
            corpus = planted_setup["corpus"]
            model = recovery_run["model"]

            topic_align = align_clusters(model.topic_word_matrix().numpy(),
                                         planted.topic_word)
            disc_align = align_clusters(model.discourse_word_matrix().numpy(),
                                        planted.disc_word)

            full = BowDataset(corpus.instances, corpus.vocab)
            assignments = []
            for start in range(0, len(full), 1024):
                idx = range(start, min(start + 1024, len(full)))
                x, c = full.dense_batch(idx)
                _, pi, _ = model.infer(torch.from_numpy(x), torch.from_numpy(c))
                assignments.append(pi.argmax(dim=-1).numpy())
            role_purity = purity(np.concatenate(assignments), corpus.flat_roles())

            detail = (f"topic overlap {topic_align.mean_top_overlap:.2f}, "
                      f"discourse overlap {disc_align.mean_top_overlap:.2f}, "
                      f"role purity {role_purity:.3f}, "
                      f"train {recovery_run['seconds']:.0f}s")
            assert topic_align.mean_top_overlap >= 0.6
            assert disc_align.mean_top_overlap >= 0.6
            assert role_purity >= 0.7
            assert recovery_run["seconds"] <= 600
            ok = True
        finally:
            _report(4, "planted recovery: top-10 overlap >= 0.6 for topics and "
                       "roles, purity >= 0.7, <= 10 min", ok, detail)


def _mean_topic_discourse_jsd(model) -> float:
    topic = model.topic_word_matrix().numpy()
    disc = model.discourse_word_matrix().numpy()
    scores = []
    for t, d in itertools.product(topic, disc):
        m = 0.5 * (t + d)
        kl_t = np.sum(t * np.log(np.maximum(t, 1e-12) / np.maximum(m, 1e-12)))
        kl_d = np.sum(d * np.log(np.maximum(d, 1e-12) / np.maximum(m, 1e-12)))
        scores.append(0.5 * kl_t + 0.5 * kl_d)
    return float(np.mean(scores))


class TestCriterion5MiLossEffect:
    def test_mi_increases_topic_discourse_separation(self, planted_setup):
        # Known-unattainable at this scale; kept faithful to the stated
        # criterion rather than weakened. Extensive paired calibration (full
        # runs, fixed-epoch pairing, and warm-up-isolated pairing across
        # several corpus designs) measured the causal effect of
        # lambda = 0.01 on the mean pairwise JSD at ~1e-4 with unstable
        # sign, orders of magnitude below run-to-run trajectory variation;
        # see the reviewer notes. The assertion below is the criterion as
        # written; the printed per-seed values document the actual margins.
        ok = False
        detail = ""
        try:
            train_set = planted_setup["train_set"]
            dev_set = planted_setup["dev_set"]
            pairs = []
            for seed in MI_SEEDS:
                jsd = {}
                for lam in (0.01, 0.0):
                    config = ModelConfig(n_topics=5, n_roles=4, vocab_size=200,
                                         lambda_mi=lam)
                    model, _ = train(train_set, dev_set, config,
                                     TrainConfig(seed=seed, **RECOVERY_TRAIN))
                    jsd[lam] = _mean_topic_discourse_jsd(model)
                pairs.append((jsd[0.01], jsd[0.0]))
            detail = ", ".join(f"seed {s}: {a:.5f} vs {b:.5f}"
                               for s, (a, b) in zip(MI_SEEDS, pairs))
            for with_mi, without_mi in pairs:
                assert with_mi > without_mi, detail
            ok = True
        finally:
            _report(5, "MI loss effect: mean topic/discourse JSD strictly larger "
                       "with lambda=0.01 than lambda=0, 3 seeds", ok, detail)


class TestCriterion6ClusteringOracles:
    def test_clustering_metric_oracles(self):
        ok = False
        tic = time.time()
        try:
            rng = np.random.default_rng(606)
            for _ in range(50):
                n = int(rng.integers(1, 13))
                assignments = list(rng.integers(0, 4, size=n))
                labels = list(rng.integers(0, 3, size=n))
                assert abs(purity(assignments, labels)
                           - brute_purity(assignments, labels)) < 1e-9
                assert abs(homogeneity(assignments, labels)
                           - brute_homogeneity(assignments, labels)) < 1e-9
                assert abs(variation_of_information(assignments, labels)
                           - brute_vi(assignments, labels)) < 1e-9
                assert abs(variation_of_information(assignments, labels)
                           - variation_of_information(labels, assignments)) < 1e-12
            identical = [0, 1, 2, 0, 1, 2]
            assert purity(identical, identical) == 1.0
            assert homogeneity(identical, identical) == 1.0
            assert variation_of_information(identical, identical) == pytest.approx(0.0)
            ok = True
        finally:
            _report(6, "clustering metrics match brute force within 1e-9; VI "
                       "symmetric; identical clusterings give (1, 1, 0)",
                    ok, f"{time.time() - tic:.1f}s")


class TestCriterion7OptimizationSanity:
    def test_smoothed_objective_non_decreasing(self, recovery_run):
        ok = False
        detail = ""
        try:
            totals = [rec.train.total for rec in recovery_run["history"].epochs[:20]]
            assert len(totals) == 20, "training stopped before epoch 20"
            smoothed = [np.mean(totals[max(0, i - 4):i + 1])
                        for i in range(len(totals))]
            diffs = np.diff(smoothed)
            detail = f"min smoothed step {diffs.min():.4f}"
            assert (diffs >= -1e-9).all()
            ok = True
        finally:
            _report(7, "window-5 smoothed training objective non-decreasing over "
                       "first 20 epochs; early stop within patience of dev optimum",
                    ok, detail)

    def test_early_stop_within_patience_of_dev_optimum(self, planted_setup,
                                                       monkeypatch):
        # Injected dev plateau: rises for 3 epochs then flattens.
        ok = False
        try:
            scripted = iter([1.0, 2.0, 3.0] + [3.0] * 20)

            def fake_eval(model, dataset, stop_flags=None, mi_marginal="batch"):
                return LossBreakdown(l_z=0, l_d=0, l_x=0, l_mi=0,
                                     total=next(scripted))

            monkeypatch.setattr(trainer_module, "evaluate_objective", fake_eval)
            config = ModelConfig(n_topics=5, n_roles=4, vocab_size=200)
            patience = 4
            model, history = train(
                planted_setup["train_set"], planted_setup["dev_set"], config,
                TrainConfig(seed=1, learning_rate=1e-3, batch_size=256,
                            max_epochs=30, patience=patience))
            assert history.best_epoch == 3
            assert history.stopped_early
            assert len(history.epochs) == history.best_epoch + patience
            ok = True
        finally:
            _report(7, "early stopping triggers within patience epochs of the "
                       "dev optimum (injected plateau)", ok)


class TestCriterion8DownstreamDirectional:
    def test_features_beat_bow_and_joint_beats_separate(self, planted_setup,
                                                        recovery_run):
        from convodisc.downstream import JointConfig, train_text_classifier

        ok = False
        detail = ""
        tic = time.time()
        try:
            corpus = planted_setup["corpus"]
            model = recovery_run["model"]
            full = BowDataset(corpus.instances, corpus.vocab)
            labels = corpus.flat_topics()

            # (a) [theta; pi] features vs raw message BoW, same linear classifier.
            n = len(full)
            x_all, c_all = full.dense_batch(range(n))
            theta, pi, _ = model.infer(torch.from_numpy(x_all),
                                       torch.from_numpy(c_all))
            features = np.concatenate([theta.numpy(), pi.numpy()], axis=1)
            feat_acc, bow_acc = [], []
            for seed in DOWNSTREAM_SEEDS:
                feat_acc.append(train_classifier(features, labels, seed=seed).accuracy)
                bow_acc.append(train_classifier(x_all, labels, seed=seed).accuracy)
            mean_feat, mean_bow = np.mean(feat_acc), np.mean(bow_acc)

            # (b) joint training vs separate training of the CNN classifier.
            train_inst, dev_inst, test_inst = split_dataset(
                corpus.instances, seed=RECOVERY_SEED)
            bow_train = planted_setup["train_set"]
            bow_test = BowDataset(test_inst, corpus.vocab)
            labels_by_id = dict(zip(full.message_ids, (int(t) for t in labels)))
            lm_train = select_labeled(bow_train, labels_by_id, corpus.vocab, 5)
            lm_test = select_labeled(bow_test, labels_by_id, corpus.vocab, 5)
            # Both arms share the pretrained model: separate freezes it,
            # joint fine-tunes a copy of it together with the CNN.
            joint_acc, separate_acc = [], []
            cfg = JointConfig(epochs=4, batch_size=64, embed_dim=200,
                              model_loss_weight=1.0)
            for seed in DOWNSTREAM_SEEDS:
                tuned = copy.deepcopy(recovery_run["model"])
                joint = train_text_classifier(lm_train, lm_test, tuned, cfg,
                                              seed=seed, update_model=True)
                joint_acc.append(joint.accuracy)
                separate = train_text_classifier(lm_train, lm_test,
                                                 recovery_run["model"], cfg,
                                                 seed=seed, update_model=False)
                separate_acc.append(separate.accuracy)
            mean_joint, mean_sep = np.mean(joint_acc), np.mean(separate_acc)

            elapsed = time.time() - tic
            detail = (f"features {mean_feat:.3f} vs BoW {mean_bow:.3f}; "
                      f"joint {mean_joint:.3f} vs separate {mean_sep:.3f}; "
                      f"{elapsed:.0f}s")
            assert mean_feat >= mean_bow
            assert mean_joint >= mean_sep
            assert elapsed <= 600
            ok = True
        finally:
            _report(8, "downstream: [theta; pi] >= raw BoW accuracy and "
                       "joint >= separate, 3 seeds, <= 10 min", ok, detail)


class TestCriterion9StructuralProperties:
    def test_structural_properties(self, tmp_path):
        ok = False
        tic = time.time()
        try:
            # Flattening: path count equals leaf count on 200 random trees.
            rng = np.random.default_rng(909)
            for _ in range(200):
                n = int(rng.integers(1, 51))
                posts = [_post("n0")] + [
                    _post(f"n{i}", f"n{rng.integers(0, i)}") for i in range(1, n)]
                tree = build_trees(posts)[0]
                paths = flatten_to_paths(tree, {p.id: [] for p in posts})
                assert len(paths) == len(tree.leaves())
                assert all(p.ids[0] == "n0" for p in paths)

            # Checkpoint round trip is bit-exact at 32-bit precision.
            model = TopicDiscourseModel(ModelConfig(4, 3, 17), seed=5)
            path = tmp_path / "roundtrip.ckpt"
            save_checkpoint(model, path, vocab_hash="h")
            loaded, _, _ = load_checkpoint(path)
            for a, b in zip(model.state_dict().values(),
                            loaded.state_dict().values()):
                assert torch.equal(a, b)

            # All probability outputs normalized within stated tolerances.
            for seed in range(10):
                m = TopicDiscourseModel(ModelConfig(4, 3, 11), seed=seed)
                x = torch.tensor(
                    np.random.default_rng(seed).integers(0, 4, size=11),
                    dtype=torch.float32)
                with torch.no_grad():
                    theta, pi, d_hard = m.infer(x, x)
                    beta = m.decode(theta, d_hard)
                    d = m.sample_discourse(
                        pi, generator=torch.Generator().manual_seed(seed))
                for vec in (theta, pi, d_hard, beta, d):
                    assert abs(float(vec.sum()) - 1.0) < 1e-5
                    assert (vec >= 0).all()
                for matrix in (m.topic_word_matrix(), m.discourse_word_matrix()):
                    assert np.abs(matrix.sum(-1).numpy() - 1).max() < 1e-5

            elapsed = time.time() - tic
            assert elapsed < 60
            ok = True
        finally:
            _report(9, "structural properties: flattening path/leaf equality, "
                       "checkpoint round trip, probability normalization, < 60 s",
                    ok, f"{time.time() - tic:.1f}s")
