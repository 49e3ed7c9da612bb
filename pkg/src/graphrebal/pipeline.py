"""End-to-end training: warm-up, per-epoch synthesis and edge scoring,
joint loss, early stopping, and evaluation metrics.

Each epoch after warm-up: generate synthetic minority nodes, propose and
score candidate edges for them, threshold the scores into a rebalanced
graph, then take one optimizer step on a weighted sum of the edge
reconstruction loss (scored enclosing subgraphs of a minibatch of real
edges and sampled non-edges) and the node classification loss on the
rebalanced graph. Validation accuracy drives checkpoint selection and
early stopping; reported metrics come from the best checkpoint.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .config import ABLATIONS, HyperParams
from .errors import ConfigError, ContractError, SamplingError, TrainingDiverged
from .graph import Graph, ImbalanceSpec, from_edge_list
from .mixer import (MixerConfig, NodePair, SyntheticNode, synthesize_nodes,
                    train_nodes_by_class)
from .model import (NodeClassifier, SubgraphEncoder, apply_threshold,
                    classify_logits, classify_nodes, encode_subgraph)
from .subgraph import (EdgeQuery, ExtractorConfig, RelevanceState,
                       extract_subgraph, sample_candidate_edges)

Array = np.ndarray


# ---------------------------------------------------------------------------
# losses


def classification_loss(logits: Tensor, labels: Array, mask: Array) -> Tensor:
    """Mean cross-entropy over masked nodes, straight from logits."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ContractError("classification loss needs at least one masked node")
    onehot = np.eye(logits.cols)[labels[idx]]
    picked = ad.hadamard(ad.log_softmax_rows(ad.gather_rows(logits, idx)),
                         ad.constant(onehot))
    return ad.scale(ad.negate(ad.sum_all(picked)), 1.0 / idx.size)


def sample_negative(g: Graph, anchor: int, rng: np.random.Generator,
                    tries: int = 1000) -> int:
    """A node that is neither ``anchor`` nor one of its neighbors."""
    for _ in range(tries):
        m = int(rng.integers(g.n))
        if m != anchor and not g.has_edge(anchor, m):
            return m
    raise SamplingError(
        f"no non-neighbor of node {anchor} found in {tries} draws")


def reconstruction_loss(scorer, g: Graph, pos_edges: Array,
                        rng: np.random.Generator) -> Tensor:
    """Squared-error edge reconstruction over a batch of real edges.

    Each positive (u, v) contributes (score - 1)^2 plus one paired
    negative (v, m) contributing score^2, where m is sampled away from
    v's neighborhood. ``scorer`` maps an EdgeQuery to a 1x1 tensor.
    """
    if len(pos_edges) == 0:
        raise ContractError("reconstruction loss needs at least one edge")
    loss = None
    for u, v in pos_edges:
        p = scorer(EdgeQuery(int(u), int(v)))
        d = ad.add(p, ad.constant([[-1.0]]))
        term = ad.hadamard(d, d)
        m = sample_negative(g, int(v), rng)
        q = scorer(EdgeQuery(int(v), m))
        term = ad.add(term, ad.hadamard(q, q))
        loss = term if loss is None else ad.add(loss, term)
    return loss


def total_loss(l_rec: Tensor, l_cls: Tensor, lam: float) -> Tensor:
    """(1 - lam) * reconstruction + lam * classification, lam in (0, 1]."""
    if not (0.0 < lam <= 1.0):
        raise ConfigError(f"lam must be in (0, 1], got {lam}")
    return ad.add(ad.scale(l_rec, 1.0 - lam), ad.scale(l_cls, lam))


# ---------------------------------------------------------------------------
# metrics


def _average_ranks(x: Array) -> Array:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    ranks[order] = np.arange(1, x.size + 1, dtype=np.float64)
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=ranks)
    return (sums / counts)[inv]


def _rank_auc(scores: Array, positive: Array) -> float | None:
    """One-vs-rest AUC from score ranks; ties count half. None if degenerate."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    macro_auc: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    per_class_auc: list[float | None]
    auc_skipped: list[int]
    confusion: list[list[int]]
    n_eval: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "per_class_precision": self.per_class_precision,
            "per_class_recall": self.per_class_recall,
            "per_class_f1": self.per_class_f1,
            "per_class_auc": self.per_class_auc,
            "auc_skipped": self.auc_skipped,
            "confusion": self.confusion, "n_eval": self.n_eval,
        }


def evaluate(probs: Array, labels: Array, mask: Array) -> MetricsReport:
    """Accuracy, macro-F1, and rank-based one-vs-rest macro AUC.

    Classes a prediction never hits get F1 zero; classes without both a
    positive and a negative in the mask are skipped from the AUC mean
    and listed in ``auc_skipped``.
    """
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ContractError("evaluate needs a non-empty mask")
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)[idx]
    p = probs[idx]
    c = probs.shape[1]
    pred = p.argmax(axis=1)

    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    accuracy = float((pred == y).mean())

    precision, recall, f1 = [], [], []
    for k in range(c):
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = confusion[k, :].sum() - tp
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
        precision.append(float(pr))
        recall.append(float(rc))
        f1.append(float(f))

    aucs: list[float | None] = []
    skipped: list[int] = []
    for k in range(c):
        a = _rank_auc(p[:, k], y == k)
        aucs.append(a)
        if a is None:
            skipped.append(k)
    defined = [a for a in aucs if a is not None]
    macro_auc = float(np.mean(defined)) if defined else 0.0

    return MetricsReport(
        accuracy=accuracy, macro_f1=float(np.mean(f1)), macro_auc=macro_auc,
        per_class_precision=precision, per_class_recall=recall,
        per_class_f1=f1, per_class_auc=aucs, auc_skipped=skipped,
        confusion=confusion.tolist(), n_eval=int(idx.size))


# ---------------------------------------------------------------------------
# ablation synthesis: plain same-class interpolation


def smote_nodes(g: Graph, spec: ImbalanceSpec, cfg: MixerConfig,
                rng: np.random.Generator) -> list[SyntheticNode]:
    """Nearest-neighbor convex interpolation inside each minority class."""
    by_class = train_nodes_by_class(g)
    out: list[SyntheticNode] = []
    for c in sorted(spec.minority_classes):
        pool = by_class.get(int(c))
        if pool is None or pool.size == 0:
            raise SamplingError(f"minority class {c} has no training nodes")
        count = int(np.ceil(cfg.zeta * pool.size))
        for _ in range(count):
            s = int(rng.choice(pool))
            others = pool[pool != s]
            if others.size == 0:
                nn = s
            else:
                dist = np.linalg.norm(g.features[others] - g.features[s], axis=1)
                nn = int(others[np.lexsort((others, dist))[0]])
            delta = float(rng.random())
            feats = g.features[s] + delta * (g.features[nn] - g.features[s])
            out.append(SyntheticNode(features=feats, label=int(c),
                                     pair=NodePair(s, nn)))
    return out


# ---------------------------------------------------------------------------
# balanced graph assembly


def build_balanced_graph(g: Graph, syn_nodes: list[SyntheticNode],
                         accepted: list[tuple[int, int, float]],
                         drop_isolated: bool) -> tuple[Graph, Array, dict[int, int]]:
    """Original graph plus synthetic nodes and their accepted edges.

    Returns the new graph, its training mask (original train nodes plus
    every kept synthetic node), and a map from synthetic index to new
    node id. Isolated synthetic nodes are kept unless ``drop_isolated``.
    """
    linked = {s for s, _, _ in accepted}
    keep = [i for i in range(len(syn_nodes))
            if not drop_isolated or i in linked]
    gid = {i: g.n + j for j, i in enumerate(keep)}
    n_new = g.n + len(keep)
    base_edges = g.to_edge_list()
    extra = np.array([[gid[s], t] for s, t, _ in accepted if s in gid],
                     dtype=np.int64).reshape(-1, 2)
    edges = np.vstack([base_edges, extra]) if extra.size else base_edges
    feats = np.vstack([g.features] + [syn_nodes[i].features.reshape(1, -1)
                                      for i in keep]) if keep else g.features
    labels = np.concatenate([g.labels, [syn_nodes[i].label for i in keep]]) \
        .astype(np.int64) if keep else g.labels
    out = from_edge_list(edges, n_new, features=feats, labels=labels)
    pad = np.zeros(len(keep), dtype=bool)
    train = np.concatenate([g.train_mask, ~pad])
    out = out.with_masks(train,
                         np.concatenate([g.val_mask, pad]),
                         np.concatenate([g.test_mask, pad]))
    return out, train, gid


def _sub_features(g: Graph, node_ids: Array, syn_features: Array | None) -> Array:
    rows = np.empty((node_ids.size, g.feature_dim))
    base = node_ids < g.n
    rows[base] = g.features[node_ids[base]]
    if (~base).any():
        if syn_features is None:
            raise ContractError("subgraph contains a synthetic node but no features given")
        rows[~base] = syn_features
    return rows


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class PipelineResult:
    test_metrics: MetricsReport
    best_val_accuracy: float
    best_epoch: int
    epochs_run: int
    n_synthetic: int
    accepted_edges: list[tuple[int, int, float]]
    history: list[dict] = field(repr=False)
    encoder: SubgraphEncoder = field(repr=False)
    classifier: NodeClassifier = field(repr=False)
    w_proj: Tensor = field(repr=False)
    best_parameters: dict[str, Array] = field(repr=False)


def _named_params(encoder: SubgraphEncoder, classifier: NodeClassifier,
                  w_proj: Tensor) -> dict[str, Tensor]:
    named = encoder.named("encoder")
    named.update(classifier.named("classifier"))
    named["mixer.w_proj"] = w_proj
    return named


def _check_finite(loss: Tensor, epoch: int, named: dict[str, Tensor],
                  log_path: str | None) -> None:
    v = loss.item()
    if np.isfinite(v):
        return
    norms = {k: float(np.linalg.norm(t.data)) for k, t in named.items()}
    if log_path:
        dump = log_path + ".diverged.json"
        with open(dump, "w") as f:
            json.dump({"epoch": epoch, "loss": repr(v), "param_norms": norms}, f,
                      indent=2)
    raise TrainingDiverged(
        f"non-finite loss {v!r} at epoch {epoch}; "
        f"largest parameter norm {max(norms.values()):.3e}")


def run_pipeline(g: Graph, spec: ImbalanceSpec, hp: HyperParams,
                 ablation: str = "full",
                 log_path: str | None = None) -> PipelineResult:
    """Train on a graph whose masks are already set; return best-checkpoint
    test metrics.

    ``ablation`` picks a variant: "no-ufm" swaps the importance-masked
    mixer for plain same-class interpolation, "no-ase" keeps fixed
    hop-neighborhood subgraphs without relevance ranking, "no-mse" swaps
    every gated layer for uniform mean aggregation.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}, got {ablation}")
    if g.labels is None or g.train_mask is None or g.val_mask is None \
            or g.test_mask is None:
        raise ContractError("run_pipeline needs labels and all three masks")
    hp.validate()
    rng = np.random.default_rng(hp.seed)
    mix_cfg = hp.mixer_config()
    ext_cfg = hp.extractor_config()
    uniform = ablation == "no-mse"
    n_classes = g.num_classes

    encoder = SubgraphEncoder.init(g.feature_dim + hp.label_cap + 1,
                                   hp.hidden_dims, hp.omega, rng, uniform)
    classifier = NodeClassifier.init(g.feature_dim, hp.hidden_dims, n_classes,
                                     hp.omega, rng, uniform)
    w_proj = ad.parameter(ad.glorot_uniform(rng, g.feature_dim, hp.proj_dim))
    named = _named_params(encoder, classifier, w_proj)
    opt = Adam(list(named.values()), hp.lr, weight_decay=hp.weight_decay)
    channel_mix = rng.standard_normal((3, 3)) if hp.random_channel_mix else None

    pos_edges = g.to_edge_list()
    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write("epoch,rec_loss,cls_loss,total_loss,val_accuracy,seconds\n")

    try:
        for _ in range(hp.warmup_epochs):
            logits = classify_logits(classifier, g.offsets, g.targets,
                                     g.features, training=True, rng=rng,
                                     drop=hp.dropout)
            loss = classification_loss(logits, g.labels, g.train_mask)
            _check_finite(loss, -1, named, log_path)
            ad.backward(loss)
            opt.step()

        snapshot = classifier.frozen_copy()
        importance: dict[int, Array] = {}
        synthesis_on = hp.zeta > 0 and len(spec.minority_classes) > 0
        best: dict | None = None
        stale = 0
        history: list[dict] = []
        epochs_run = 0

        for epoch in range(hp.epochs):
            t0 = time.perf_counter()
            epochs_run = epoch + 1
            if epoch % hp.ig_refresh == 0:
                snapshot = classifier.frozen_copy()
                importance.clear()

            state = None
            if ablation != "no-ase":
                state = RelevanceState(encoder, g, channel_mix)

            syn_nodes: list[SyntheticNode] = []
            accepted: list[tuple[int, int, float]] = []
            if synthesis_on:
                if ablation == "no-ufm":
                    syn_nodes = smote_nodes(g, spec, mix_cfg, rng)
                else:
                    syn_nodes = synthesize_nodes(g, spec, mix_cfg, snapshot,
                                                 w_proj.data, rng, importance)
                cands = sample_candidate_edges([s.pair for s in syn_nodes], g,
                                               ext_cfg, rng)
                scores = np.empty(len(cands))
                for i, cand in enumerate(cands):
                    syn = syn_nodes[cand.syn_index]
                    query = EdgeQuery(u=g.n, v=cand.target,
                                      anchors=(syn.pair.source, syn.pair.reference),
                                      u_features=syn.features)
                    sub = extract_subgraph(g, query, ext_cfg, state,
                                           no_ranking=ablation == "no-ase")
                    feats = _sub_features(g, sub.node_ids, syn.features)
                    scores[i] = encode_subgraph(encoder, sub, feats,
                                                training=False, rng=rng).item()
                keep = apply_threshold(scores, hp.eta)
                accepted = [(cands[i].syn_index, cands[i].target, float(scores[i]))
                            for i in np.flatnonzero(keep)]

            balanced, bal_train, _ = build_balanced_graph(
                g, syn_nodes, accepted, hp.drop_isolated_synthetic)

            if hp.lam < 1.0 and pos_edges.shape[0] > 0:
                batch = pos_edges[rng.choice(
                    pos_edges.shape[0],
                    size=min(hp.batch_size, pos_edges.shape[0]), replace=False)]

                def scorer(query: EdgeQuery) -> Tensor:
                    sub = extract_subgraph(g, query, ext_cfg, state,
                                           no_ranking=ablation == "no-ase")
                    feats = _sub_features(g, sub.node_ids, None)
                    return encode_subgraph(encoder, sub, feats, training=True,
                                           rng=rng, drop=hp.dropout)

                l_rec = reconstruction_loss(scorer, g, batch, rng)
            else:
                l_rec = ad.constant([[0.0]])
            logits = classify_logits(classifier, balanced.offsets,
                                     balanced.targets, balanced.features,
                                     training=True, rng=rng, drop=hp.dropout)
            l_cls = classification_loss(logits, balanced.labels, bal_train)
            loss = total_loss(l_rec, l_cls, hp.lam)
            _check_finite(loss, epoch, named, log_path)
            ad.backward(loss)
            opt.step()

            eval_probs = classify_nodes(
                classifier, balanced.offsets, balanced.targets,
                balanced.features, training=False, rng=rng).data
            val_idx = np.flatnonzero(balanced.val_mask)
            val_acc = float((eval_probs[val_idx].argmax(axis=1)
                             == balanced.labels[val_idx]).mean())
            row = {"epoch": epoch, "rec_loss": l_rec.item(),
                   "cls_loss": l_cls.item(), "total_loss": loss.item(),
                   "val_accuracy": val_acc,
                   "seconds": time.perf_counter() - t0}
            history.append(row)
            if log_file:
                log_file.write(
                    f"{row['epoch']},{row['rec_loss']!r},{row['cls_loss']!r},"
                    f"{row['total_loss']!r},{row['val_accuracy']!r},"
                    f"{row['seconds']:.3f}\n")

            if best is None or val_acc > best["val_accuracy"]:
                best = {
                    "val_accuracy": val_acc, "epoch": epoch,
                    "params": {k: t.data.copy() for k, t in named.items()},
                    "test": evaluate(eval_probs, balanced.labels,
                                     balanced.test_mask),
                    "n_synthetic": len(syn_nodes),
                    "accepted": accepted,
                }
                stale = 0
            else:
                stale += 1
                if stale >= hp.patience:
                    break
    finally:
        if log_file:
            log_file.close()

    if best is None:
        # zero training epochs: report the warm-up classifier as-is
        eval_probs = classify_nodes(classifier, g.offsets, g.targets, g.features,
                                    training=False, rng=rng).data
        val_idx = np.flatnonzero(g.val_mask)
        best = {
            "val_accuracy": float((eval_probs[val_idx].argmax(axis=1)
                                   == g.labels[val_idx]).mean()),
            "epoch": -1,
            "params": {k: t.data.copy() for k, t in named.items()},
            "test": evaluate(eval_probs, g.labels, g.test_mask),
            "n_synthetic": 0, "accepted": [],
        }
        history = []

    for name, tensor in named.items():
        tensor.data[:] = best["params"][name]

    return PipelineResult(
        test_metrics=best["test"], best_val_accuracy=best["val_accuracy"],
        best_epoch=best["epoch"], epochs_run=epochs_run,
        n_synthetic=best["n_synthetic"], accepted_edges=best["accepted"],
        history=history, encoder=encoder, classifier=classifier, w_proj=w_proj,
        best_parameters=best["params"])
