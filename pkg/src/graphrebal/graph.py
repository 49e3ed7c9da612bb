"""Graph storage, homophily measures, traversal, splits, and a block-model
synthetic dataset generator.

Graphs are undirected and stored as CSR: ``offsets`` has n+1 entries and
``targets[offsets[u]:offsets[u+1]]`` lists u's neighbors in ascending
order. Self loops and duplicate edges are removed at construction.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ContractError, IngestionError, SplitError

Array = np.ndarray


@dataclass(frozen=True)
class Graph:
    n: int
    offsets: Array            # int64, length n + 1
    targets: Array            # int64, sorted within each neighbor run
    features: Array           # float64, n x d
    labels: Array | None = None          # int64 in 0..C-1
    train_mask: Array | None = None      # bool, length n
    val_mask: Array | None = None
    test_mask: Array | None = None

    def neighbors(self, u: int) -> Array:
        return self.targets[self.offsets[u]:self.offsets[u + 1]]

    def degree(self, u: int) -> int:
        return int(self.offsets[u + 1] - self.offsets[u])

    @property
    def degrees(self) -> Array:
        return np.diff(self.offsets)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return self.targets.size // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            raise ContractError("graph has no labels")
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def has_edge(self, u: int, v: int) -> bool:
        run = self.neighbors(u)
        i = np.searchsorted(run, v)
        return bool(i < run.size and run[i] == v)

    def to_edge_list(self) -> Array:
        """Undirected edges as an m x 2 array with src < dst."""
        src = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        keep = src < self.targets
        return np.stack([src[keep], self.targets[keep]], axis=1)

    def with_masks(self, train: Array, val: Array, test: Array) -> "Graph":
        for name, m in (("train", train), ("val", val), ("test", test)):
            if m.shape != (self.n,) or m.dtype != np.bool_:
                raise ContractError(f"{name} mask must be a bool array of length {self.n}")
        if ((train & val) | (train & test) | (val & test)).any():
            raise ContractError("masks must be pairwise disjoint")
        return replace(self, train_mask=train, val_mask=val, test_mask=test)


def from_edge_list(edges, n: int, features: Array | None = None,
                   labels: Array | None = None) -> Graph:
    """Build a CSR graph from undirected edge pairs.

    Self loops are dropped, duplicates collapse, and both directions are
    stored. ``edges`` may be any iterable of (u, v) pairs.
    """
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                   dtype=np.int64).reshape(-1, 2)
    if e.size:
        bad = np.flatnonzero((e < 0).any(axis=1) | (e >= n).any(axis=1))
        if bad.size:
            i = int(bad[0])
            raise IngestionError(
                f"edge {i}: endpoint {tuple(e[i])} out of range for {n} nodes")
        e = e[e[:, 0] != e[:, 1]]
    if e.size:
        both = np.vstack([e, e[:, ::-1]])
        both = np.unique(both, axis=0)
        src, dst = both[:, 0], both[:, 1]
    else:
        src = dst = np.empty(0, dtype=np.int64)
    counts = np.bincount(src, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    if features is None:
        features = np.zeros((n, 0))
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != n:
        raise IngestionError(
            f"feature matrix has {features.shape[0]} rows for {n} nodes")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise IngestionError(f"labels must have length {n}, got {labels.shape}")
        if labels.size and labels.min() < 0:
            raise IngestionError("labels must be non-negative class ids")
    return Graph(n=n, offsets=offsets, targets=dst, features=features,
                 labels=labels)


def _require_labels(g: Graph) -> Array:
    if g.labels is None:
        raise ContractError("operation needs node labels")
    return g.labels


def edge_homophily(g: Graph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    labels = _require_labels(g)
    if g.targets.size == 0:
        return 0.0
    src = np.repeat(np.arange(g.n, dtype=np.int64), g.degrees)
    return float((labels[src] == labels[g.targets]).mean())


def node_homophily(g: Graph) -> float:
    """Mean over nodes of the same-label neighbor fraction.

    Isolated nodes contribute zero to the average and the denominator
    stays |V|.
    """
    labels = _require_labels(g)
    if g.n == 0:
        return 0.0
    src = np.repeat(np.arange(g.n, dtype=np.int64), g.degrees)
    same = (labels[src] == labels[g.targets]).astype(np.float64)
    same_counts = np.bincount(src, weights=same, minlength=g.n)
    deg = g.degrees
    frac = np.divide(same_counts, deg, out=np.zeros(g.n), where=deg > 0)
    return float(frac.mean())


def bfs_distance(g: Graph, source: int, cutoff: int | None = None) -> Array:
    """Hop distances from source; unreachable entries are +inf."""
    if not (0 <= source < g.n):
        raise ContractError(f"source {source} out of range for {g.n} nodes")
    dist = np.full(g.n, np.inf)
    dist[source] = 0.0
    frontier = np.array([source], dtype=np.int64)
    d = 0
    while frontier.size and (cutoff is None or d < cutoff):
        nxt = np.concatenate([g.neighbors(int(u)) for u in frontier]) \
            if frontier.size else np.empty(0, dtype=np.int64)
        nxt = np.unique(nxt)
        nxt = nxt[np.isinf(dist[nxt])]
        d += 1
        dist[nxt] = d
        frontier = nxt
    return dist


def k_hop_neighbors(g: Graph, center: int, h: int) -> Array:
    """Sorted node ids within h hops of center, center included."""
    if h < 1:
        raise ContractError(f"hop count must be >= 1, got {h}")
    dist = bfs_distance(g, center, cutoff=h)
    return np.flatnonzero(dist <= h)


# ---------------------------------------------------------------------------
# imbalance handling


@dataclass(frozen=True)
class ImbalanceSpec:
    """Which classes are scarce and how scarce they are.

    ``im_ratio`` is the minority-to-majority size ratio used when the
    split artificially downsamples minority training nodes.
    ``majority_train`` is the per-majority-class training quota in the
    semi-supervised setting.
    """
    minority_classes: tuple[int, ...]
    im_ratio: float = 0.1
    majority_train: int = 20

    def __post_init__(self):
        if not (0.0 < self.im_ratio <= 1.0):
            raise ContractError(f"im_ratio must be in (0, 1], got {self.im_ratio}")
        if self.majority_train < 1:
            raise ContractError("majority_train must be >= 1")
        if len(set(self.minority_classes)) != len(self.minority_classes):
            raise ContractError("duplicate minority class ids")


def make_imbalanced_split(g: Graph, spec: ImbalanceSpec, setting: str = "semi",
                          *, val_per_class: int = 10, test_per_class: int = 20,
                          rng: np.random.Generator) -> tuple[Array, Array, Array]:
    """Build disjoint train/val/test masks with a controlled class skew.

    semi: each majority class contributes ``spec.majority_train``
    training nodes and each minority class floor(majority_train *
    im_ratio); val and test take the same per-class counts everywhere.

    supervised: 7:1:2 per class, with val/test quotas equalized to the
    smallest class so every class is evenly represented at evaluation,
    and minority training pools downsampled to im_ratio of the largest
    majority training pool.
    """
    labels = _require_labels(g)
    classes = np.unique(labels)
    for c in spec.minority_classes:
        if c not in classes:
            raise SplitError(f"minority class {c} not present in labels")
    train = np.zeros(g.n, dtype=bool)
    val = np.zeros(g.n, dtype=bool)
    test = np.zeros(g.n, dtype=bool)

    if setting == "semi":
        quotas = {}
        for c in classes:
            if c in spec.minority_classes:
                quotas[int(c)] = int(np.floor(spec.majority_train * spec.im_ratio))
            else:
                quotas[int(c)] = spec.majority_train
        for c in classes:
            pool = np.flatnonzero(labels == c)
            need = quotas[int(c)] + val_per_class + test_per_class
            if pool.size < need:
                raise SplitError(
                    f"class {int(c)} has {pool.size} nodes, needs "
                    f"{quotas[int(c)]}+{val_per_class}+{test_per_class}")
            pool = rng.permutation(pool)
            k = quotas[int(c)]
            train[pool[:k]] = True
            val[pool[k:k + val_per_class]] = True
            test[pool[k + val_per_class:need]] = True
    elif setting == "supervised":
        sizes = {int(c): int((labels == c).sum()) for c in classes}
        val_q = min(int(np.floor(0.1 * s)) for s in sizes.values())
        test_q = min(int(np.floor(0.2 * s)) for s in sizes.values())
        if val_q < 1 or test_q < 1:
            small = min(sizes, key=sizes.get)
            raise SplitError(f"class {small} too small for a 7:1:2 split")
        majority_train = {c: int(np.floor(0.7 * sizes[c]))
                          for c in sizes if c not in spec.minority_classes}
        if not majority_train:
            raise SplitError("supervised split needs at least one majority class")
        ref = max(majority_train.values())
        for c in classes:
            c = int(c)
            pool = rng.permutation(np.flatnonzero(labels == c))
            if c in spec.minority_classes:
                k = int(np.floor(ref * spec.im_ratio))
            else:
                k = majority_train[c]
            if pool.size < val_q + test_q + k:
                raise SplitError(
                    f"class {c} has {pool.size} nodes, needs {k}+{val_q}+{test_q}")
            val[pool[:val_q]] = True
            test[pool[val_q:val_q + test_q]] = True
            train[pool[val_q + test_q:val_q + test_q + k]] = True
    else:
        raise ContractError(f"unknown split setting {setting!r}")
    return train, val, test


# ---------------------------------------------------------------------------
# stochastic block model


@dataclass(frozen=True)
class SbmSpec:
    """Planted-partition generator with Gaussian class features.

    Edges inside a class appear with probability ``p_intra``, edges
    across classes with ``p_inter``. Features are the class mean plus
    isotropic noise. When ``means`` is omitted, class k's mean is
    ``separation`` on coordinate k and zero elsewhere.
    """
    sizes: tuple[int, ...]
    p_intra: float
    p_inter: float
    feature_dim: int = 8
    separation: float = 2.0
    noise: float = 1.0
    means: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.sizes or any(s < 1 for s in self.sizes):
            raise ContractError(f"block sizes must be positive, got {self.sizes}")
        for name, p in (("p_intra", self.p_intra), ("p_inter", self.p_inter)):
            if not (0.0 <= p <= 1.0):
                raise ContractError(f"{name} must be in [0, 1], got {p}")
        if self.means is not None and len(self.means) != len(self.sizes):
            raise ContractError("means must have one row per block")


def generate_sbm(spec: SbmSpec) -> Graph:
    rng = np.random.default_rng(spec.seed)
    k = len(spec.sizes)
    n = int(sum(spec.sizes))
    labels = np.repeat(np.arange(k, dtype=np.int64), spec.sizes)
    if spec.means is not None:
        means = np.asarray(spec.means, dtype=np.float64)
        d = means.shape[1]
    else:
        d = spec.feature_dim
        means = spec.separation * np.eye(k, d)
    probs = np.where(labels[:, None] == labels[None, :], spec.p_intra, spec.p_inter)
    iu, ju = np.triu_indices(n, k=1)
    present = rng.random(iu.size) < probs[iu, ju]
    edges = np.stack([iu[present], ju[present]], axis=1)
    feats = means[labels] + spec.noise * rng.standard_normal((n, d))
    return from_edge_list(edges, n, features=feats, labels=labels)
