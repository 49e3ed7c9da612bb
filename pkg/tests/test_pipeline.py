"""Losses, evaluation metrics, balanced-graph assembly, and the training
loop contract.

Metric implementations are cross-checked against scikit-learn on random
predictions; losses against hand-worked values and sklearn's log_loss.
"""
from __future__ import annotations

import os

import numpy as np
import pytest
import sklearn.metrics

import graphrebal.autodiff as ad
from graphrebal.config import HyperParams
from graphrebal.errors import (ConfigError, ContractError, SamplingError,
                               TrainingDiverged)
from graphrebal.graph import ImbalanceSpec, SbmSpec, from_edge_list, generate_sbm, \
    make_imbalanced_split
from graphrebal.mixer import MixerConfig
from graphrebal.pipeline import (MetricsReport, build_balanced_graph,
                                 classification_loss, evaluate,
                                 reconstruction_loss, run_pipeline,
                                 sample_negative, smote_nodes, total_loss)
from graphrebal.subgraph import EdgeQuery


def masked_graph(seed=1):
    g = generate_sbm(SbmSpec(sizes=(40, 40, 16), p_intra=0.15, p_inter=0.02,
                             seed=seed))
    spec = ImbalanceSpec(minority_classes=(2,), im_ratio=0.2)
    tr, va, te = make_imbalanced_split(g, spec, "semi", val_per_class=2,
                                       test_per_class=3,
                                       rng=np.random.default_rng(seed))
    return g.with_masks(tr, va, te), spec


def quick_hp(**kw):
    base = dict(epochs=3, warmup_epochs=2, hidden_dims=(16, 8), dropout=0.3,
                batch_size=4, ig_steps=5, proj_dim=8, patience=5, seed=0)
    base.update(kw)
    return HyperParams(**base)


# losses


def test_classification_loss_hand_value():
    # log-odds of [[0.9, 0.1], [0.2, 0.8]]; softmax(log p) recovers p
    logits = ad.constant(np.log(np.array([[0.9, 0.1], [0.2, 0.8]])))
    labels = np.array([0, 1])
    loss = classification_loss(logits, labels, np.array([True, True]))
    assert loss.item() == pytest.approx(-(np.log(0.9) + np.log(0.8)) / 2.0)


def test_classification_loss_respects_mask():
    logits = ad.constant(np.log(np.array([[0.9, 0.1], [0.5, 0.5]])))
    loss = classification_loss(logits, np.array([0, 0]),
                               np.array([True, False]))
    assert loss.item() == pytest.approx(-np.log(0.9))


def test_classification_loss_matches_sklearn_log_loss():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(4), size=30)
    labels = rng.integers(4, size=30)
    mask = rng.random(30) < 0.7
    got = classification_loss(ad.constant(np.log(probs)), labels, mask).item()
    ref = sklearn.metrics.log_loss(labels[mask], probs[mask],
                                   labels=list(range(4)))
    assert got == pytest.approx(ref, rel=1e-9)


def test_classification_loss_empty_mask_rejected():
    with pytest.raises(ContractError):
        classification_loss(ad.constant(np.zeros((2, 2))),
                            np.array([0, 1]), np.array([False, False]))


def test_classification_loss_gradient_direction():
    # raising the true-class logit must lower the loss
    z = ad.parameter(np.array([[0.6, 0.4]]))
    loss = classification_loss(z, np.array([0]), np.array([True]))
    ad.backward(loss)
    assert z.grad[0, 0] < 0


def test_classification_loss_survives_saturated_logits():
    # a 1000-unit logit gap underflows any explicit softmax probability,
    # yet the loss must stay finite with a live gradient toward the fix
    z = ad.parameter(np.array([[-500.0, 500.0]]))
    loss = classification_loss(z, np.array([0]), np.array([True]))
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(1000.0)
    ad.backward(loss)
    assert z.grad[0, 0] == pytest.approx(-1.0)
    assert z.grad[0, 1] == pytest.approx(1.0)


def test_reconstruction_loss_constant_scorer_oracle():
    # scorer pinned at 0.5: every positive and negative term is 0.25,
    # so k edges cost exactly 0.5 * k
    g = from_edge_list(np.array([[0, 1], [1, 2], [2, 3]]), 6,
                       features=np.zeros((6, 1)))
    calls = []

    def scorer(q: EdgeQuery):
        calls.append((q.u, q.v))
        return ad.constant([[0.5]])

    edges = g.to_edge_list()
    loss = reconstruction_loss(scorer, g, edges, np.random.default_rng(0))
    assert loss.item() == pytest.approx(0.5 * len(edges))
    assert len(calls) == 2 * len(edges)


def test_reconstruction_loss_perfect_scores_vanish():
    g = from_edge_list(np.array([[0, 1]]), 4, features=np.zeros((4, 1)))
    pos_edges = g.to_edge_list()

    def scorer(q: EdgeQuery):
        return ad.constant([[1.0]]) if g.has_edge(q.u, q.v) \
            else ad.constant([[0.0]])

    loss = reconstruction_loss(scorer, g, pos_edges, np.random.default_rng(0))
    assert loss.item() == pytest.approx(0.0)


def test_reconstruction_loss_needs_edges():
    g = from_edge_list(np.array([[0, 1]]), 3, features=np.zeros((3, 1)))
    with pytest.raises(ContractError):
        reconstruction_loss(lambda q: ad.constant([[0.5]]), g,
                            np.empty((0, 2), dtype=np.int64),
                            np.random.default_rng(0))


def test_sample_negative_avoids_neighbors_and_self():
    g = from_edge_list(np.array([[0, 1], [0, 2]]), 6,
                       features=np.zeros((6, 1)))
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = sample_negative(g, 0, rng)
        assert m not in (0, 1, 2)


def test_sample_negative_exhaustion_raises():
    g = from_edge_list(np.array([[0, 1]]), 2, features=np.zeros((2, 1)))
    with pytest.raises(SamplingError):
        sample_negative(g, 0, np.random.default_rng(0), tries=50)


def test_total_loss_weighting_oracle():
    rec = ad.constant([[2.0]])
    cls = ad.constant([[10.0]])
    assert total_loss(rec, cls, 0.25).item() == pytest.approx(4.0)
    assert total_loss(rec, cls, 1.0).item() == pytest.approx(10.0)
    tiny = total_loss(ad.constant([[1.0]]), ad.constant([[1.0]]), 1e-6)
    assert tiny.item() == pytest.approx(1.0)


def test_total_loss_lambda_range():
    one = ad.constant([[1.0]])
    with pytest.raises(ConfigError):
        total_loss(one, one, 0.0)
    with pytest.raises(ConfigError):
        total_loss(one, one, 1.5)


# metrics


def random_predictions(seed, n=60, c=4):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=n)
    labels = rng.integers(c, size=n)
    mask = rng.random(n) < 0.8
    mask[:c] = True
    labels[:c] = np.arange(c)  # every class present
    return probs, labels, mask


def test_accuracy_and_f1_match_sklearn():
    for seed in range(3):
        probs, labels, mask = random_predictions(seed)
        rep = evaluate(probs, labels, mask)
        pred = probs[mask].argmax(axis=1)
        assert rep.accuracy == pytest.approx(
            sklearn.metrics.accuracy_score(labels[mask], pred))
        assert rep.macro_f1 == pytest.approx(
            sklearn.metrics.f1_score(labels[mask], pred, average="macro",
                                     zero_division=0,
                                     labels=list(range(4))))


def test_confusion_matrix_matches_sklearn():
    probs, labels, mask = random_predictions(7)
    rep = evaluate(probs, labels, mask)
    ref = sklearn.metrics.confusion_matrix(labels[mask],
                                           probs[mask].argmax(axis=1),
                                           labels=list(range(4)))
    np.testing.assert_array_equal(np.array(rep.confusion), ref)


def test_auc_matches_sklearn_one_vs_rest():
    for seed in range(3):
        probs, labels, mask = random_predictions(seed + 10)
        rep = evaluate(probs, labels, mask)
        for k in range(4):
            ref = sklearn.metrics.roc_auc_score(labels[mask] == k,
                                                probs[mask][:, k])
            assert rep.per_class_auc[k] == pytest.approx(ref)
        refs = [sklearn.metrics.roc_auc_score(labels[mask] == k,
                                              probs[mask][:, k])
                for k in range(4)]
        assert rep.macro_auc == pytest.approx(np.mean(refs))


def test_auc_handles_ties_like_sklearn():
    probs = np.array([[0.5, 0.5]] * 4 + [[0.9, 0.1], [0.1, 0.9]])
    labels = np.array([0, 1, 0, 1, 0, 1])
    mask = np.ones(6, dtype=bool)
    rep = evaluate(probs, labels, mask)
    ref = sklearn.metrics.roc_auc_score(labels == 0, probs[:, 0])
    assert rep.per_class_auc[0] == pytest.approx(ref)


def test_auc_skips_single_class_masks():
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
    labels = np.array([0, 1, 0])
    rep = evaluate(probs, labels, np.ones(3, dtype=bool))
    assert rep.auc_skipped == [2]
    assert rep.per_class_auc[2] is None
    # macro over defined classes only
    defined = [rep.per_class_auc[0], rep.per_class_auc[1]]
    assert rep.macro_auc == pytest.approx(np.mean(defined))


def test_missing_predicted_class_gets_zero_f1():
    probs = np.array([[0.9, 0.1, 0.0], [0.8, 0.2, 0.0], [0.7, 0.3, 0.0]])
    labels = np.array([0, 0, 2])
    rep = evaluate(probs, labels, np.ones(3, dtype=bool))
    assert rep.per_class_f1[2] == 0.0
    assert rep.per_class_f1[1] == 0.0


def test_evaluate_empty_mask_rejected():
    with pytest.raises(ContractError):
        evaluate(np.ones((2, 2)) / 2, np.array([0, 1]),
                 np.zeros(2, dtype=bool))


# ablation synthesis and graph assembly


def test_smote_counts_labels_and_interpolation():
    g, spec = masked_graph()
    nodes = smote_nodes(g, spec, MixerConfig(zeta=1.0),
                        np.random.default_rng(0))
    train_minority = int((g.train_mask & (g.labels == 2)).sum())
    assert len(nodes) == train_minority  # ceil(1.0 * pool)
    for syn in nodes:
        assert syn.label == 2
        xs = g.features[syn.pair.source]
        xt = g.features[syn.pair.reference]
        # synthetic point lies on the segment between source and neighbor
        lo = np.minimum(xs, xt) - 1e-12
        hi = np.maximum(xs, xt) + 1e-12
        assert np.all(syn.features >= lo) and np.all(syn.features <= hi)
        assert g.labels[syn.pair.reference] == 2


def test_smote_nearest_neighbor_is_same_class_closest():
    feats = np.array([[0.0], [1.0], [10.0], [0.2]])
    labels = np.array([0, 0, 1, 0])
    g = from_edge_list(np.array([[0, 1]]), 4, features=feats, labels=labels)
    train = np.array([True, True, False, True])
    g = g.with_masks(train, ~train & np.array([False, False, True, False]),
                     np.zeros(4, dtype=bool))
    spec = ImbalanceSpec(minority_classes=(0,), im_ratio=0.5)
    nodes = smote_nodes(g, spec, MixerConfig(zeta=1.0),
                        np.random.default_rng(1))
    for syn in nodes:
        src = syn.pair.source
        dists = {c: abs(feats[c, 0] - feats[src, 0])
                 for c in (0, 1, 3) if c != src}
        assert syn.pair.reference == min(dists, key=dists.get)


def test_build_balanced_graph_wires_accepted_edges():
    g, spec = masked_graph()
    from graphrebal.mixer import NodePair, SyntheticNode
    syn = [SyntheticNode(np.zeros(g.feature_dim), 2, NodePair(0, 1)),
           SyntheticNode(np.ones(g.feature_dim), 2, NodePair(2, 3))]
    accepted = [(0, 5, 0.9)]
    out, train, gid = build_balanced_graph(g, syn, accepted,
                                           drop_isolated=False)
    assert out.n == g.n + 2
    assert out.has_edge(gid[0], 5)
    assert out.degree(gid[1]) == 0
    assert train[gid[0]] and train[gid[1]]
    assert not out.val_mask[gid[0]] and not out.test_mask[gid[0]]
    np.testing.assert_array_equal(out.labels[g.n:], [2, 2])
    assert out.num_edges == g.num_edges + 1


def test_build_balanced_graph_drops_isolated_when_asked():
    g, spec = masked_graph()
    from graphrebal.mixer import NodePair, SyntheticNode
    syn = [SyntheticNode(np.zeros(g.feature_dim), 2, NodePair(0, 1)),
           SyntheticNode(np.ones(g.feature_dim), 2, NodePair(2, 3))]
    accepted = [(1, 7, 0.8)]
    out, train, gid = build_balanced_graph(g, syn, accepted,
                                           drop_isolated=True)
    assert out.n == g.n + 1
    assert 0 not in gid
    assert out.has_edge(gid[1], 7)


def test_build_balanced_graph_no_synthesis_returns_same_structure():
    g, spec = masked_graph()
    out, train, gid = build_balanced_graph(g, [], [], drop_isolated=False)
    assert out.n == g.n
    np.testing.assert_array_equal(train, g.train_mask)


# training loop


def test_run_pipeline_happy_path_contract():
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(), "full")
    assert res.epochs_run == 3
    assert 0 <= res.best_epoch < 3
    assert len(res.history) == 3
    for row in res.history:
        assert set(row) == {"epoch", "rec_loss", "cls_loss", "total_loss",
                            "val_accuracy", "seconds"}
        assert np.isfinite(row["total_loss"])
    assert isinstance(res.test_metrics, MetricsReport)
    assert res.n_synthetic == 4  # ceil(1.0 * floor(20 * 0.2))


def test_run_pipeline_requires_masks():
    g, spec = masked_graph()
    bare = generate_sbm(SbmSpec(sizes=(10, 10), p_intra=0.3, p_inter=0.05))
    with pytest.raises(ContractError):
        run_pipeline(bare, spec, quick_hp(), "full")


def test_run_pipeline_rejects_unknown_ablation():
    g, spec = masked_graph()
    with pytest.raises(ConfigError):
        run_pipeline(g, spec, quick_hp(), "no-such-thing")


def test_run_pipeline_deterministic_across_calls():
    g, spec = masked_graph()
    a = run_pipeline(g, spec, quick_hp(), "full")
    b = run_pipeline(g, spec, quick_hp(), "full")
    assert len(a.history) == len(b.history)
    for ra, rb in zip(a.history, b.history):
        assert ra["total_loss"] == rb["total_loss"]
        assert ra["val_accuracy"] == rb["val_accuracy"]
    assert a.test_metrics.accuracy == b.test_metrics.accuracy


def test_run_pipeline_seed_changes_trajectory():
    g, spec = masked_graph()
    a = run_pipeline(g, spec, quick_hp(seed=0), "full")
    b = run_pipeline(g, spec, quick_hp(seed=1), "full")
    assert any(ra["total_loss"] != rb["total_loss"]
               for ra, rb in zip(a.history, b.history))


def test_run_pipeline_early_stops_on_patience():
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(epochs=50, patience=2, lam=1.0),
                       "full")
    assert res.epochs_run < 50
    assert res.best_epoch <= res.epochs_run - 1


def test_run_pipeline_restores_best_parameters():
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(epochs=5), "full")
    named = res.classifier.named("classifier")
    for k, t in named.items():
        np.testing.assert_array_equal(t.data, res.best_parameters[k])


def test_run_pipeline_pure_classification_mode():
    # lam = 1.0 skips the reconstruction batch entirely
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(lam=1.0), "full")
    assert all(row["rec_loss"] == 0.0 for row in res.history)


def test_run_pipeline_zeta_zero_disables_synthesis():
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(zeta=0.0), "full")
    assert res.n_synthetic == 0
    assert res.accepted_edges == []


def test_run_pipeline_zero_epochs_reports_warmup_model():
    g, spec = masked_graph()
    res = run_pipeline(g, spec, quick_hp(epochs=0), "full")
    assert res.epochs_run == 0
    assert res.best_epoch == -1
    assert res.history == []
    assert 0.0 <= res.test_metrics.accuracy <= 1.0


def test_run_pipeline_divergence_dump(tmp_path):
    g, spec = masked_graph()
    bad = g.features.copy()
    bad[0, 0] = np.nan
    gg = from_edge_list(g.to_edge_list(), g.n, features=bad, labels=g.labels)
    gg = gg.with_masks(g.train_mask, g.val_mask, g.test_mask)
    log = str(tmp_path / "train.csv")
    with pytest.raises(TrainingDiverged, match="non-finite"):
        run_pipeline(gg, spec, quick_hp(), "full", log_path=log)
    assert os.path.exists(log + ".diverged.json")


def test_run_pipeline_writes_epoch_log(tmp_path):
    g, spec = masked_graph()
    log = str(tmp_path / "train.csv")
    run_pipeline(g, spec, quick_hp(), "full", log_path=log)
    lines = open(log).read().strip().splitlines()
    assert lines[0] == "epoch,rec_loss,cls_loss,total_loss,val_accuracy,seconds"
    assert len(lines) == 4


def test_run_pipeline_ablations_share_contract():
    g, spec = masked_graph()
    for ab in ("no-ufm", "no-ase", "no-mse"):
        res = run_pipeline(g, spec, quick_hp(), ab)
        assert res.epochs_run == 3
        assert res.n_synthetic > 0
