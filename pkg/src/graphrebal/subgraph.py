"""Candidate edge sampling and enclosing-subgraph extraction.

For every synthetic node the extractor proposes link targets around the
pair that produced it, then builds one enclosing subgraph per proposed
edge: pool the h-hop neighborhoods of both endpoints, rank pool nodes by
a filter-profile relevance score damped by distance, keep a density-
derived number of them, and tag each kept node with a double-radius
structural label. The candidate edge itself is never part of its own
subgraph.

A synthetic endpoint is provisionally wired to its source and reference
nodes for distance purposes; each candidate sees only its own synthetic
node, so extractions are independent of one another.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .graph import Graph
from .mixer import NodePair
from .model import (MultiFilterLayer, SubgraphEncoder, aggregate_single_np,
                    edge_profiles_np, layer_forward, neighbor_profile_means)
from .autodiff import constant

Array = np.ndarray


@dataclass(frozen=True)
class ExtractorConfig:
    xi: float = 0.3          # fraction of the local pool proposed as targets
    hop: int = 2             # neighborhood radius pooled around each endpoint
    label_cap: int = 10      # structural labels clamp here; one-hot width cap+1
    random_channel_mix: bool = False  # random 3x3 relevance mix instead of identity

    def __post_init__(self):
        if not (0.0 < self.xi <= 1.0):
            raise ConfigError(f"xi must be in (0, 1], got {self.xi}")
        if self.hop < 1:
            raise ConfigError(f"hop must be >= 1, got {self.hop}")
        if self.label_cap < 1:
            raise ConfigError(f"label_cap must be >= 1, got {self.label_cap}")


@dataclass
class CandidateEdge:
    syn_index: int           # position in this round's synthetic node list
    target: int              # original graph node id
    pair: NodePair


@dataclass
class EdgeQuery:
    """One edge whose enclosing subgraph is wanted.

    ``u`` may be ``g.n`` to denote a synthetic endpoint, in which case
    ``anchors`` are the nodes it is provisionally wired to and
    ``u_features`` its feature row. For real-edge queries leave both
    unset.
    """
    u: int
    v: int
    anchors: tuple[int, int] | None = None
    u_features: Array | None = None


@dataclass
class Subgraph:
    node_ids: Array          # sorted global ids; g.n denotes the synthetic node
    offsets: Array           # local CSR
    targets: Array
    center_u: int            # local indices
    center_v: int
    struct_labels: Array     # int per node, 0 = unreachable from a center
    label_onehot: Array      # (m, cap + 1)

    @property
    def size(self) -> int:
        return int(self.node_ids.size)


# ---------------------------------------------------------------------------
# graph view with one provisional synthetic node


def _gather_runs(offsets: Array, targets: Array, nodes: Array) -> Array:
    starts = offsets[nodes]
    lens = offsets[nodes + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    seg_starts = np.cumsum(lens) - lens
    pos = np.arange(total) - np.repeat(seg_starts, lens)
    return targets[np.repeat(starts, lens) + pos]


class OverlayView:
    """Base graph plus at most one extra node, minus one forbidden edge."""

    def __init__(self, g: Graph, syn_gid: int | None = None,
                 anchors: tuple[int, ...] = (),
                 forbidden: tuple[int, int] | None = None):
        if syn_gid is not None and syn_gid != g.n:
            raise ContractError(f"synthetic node id must be {g.n}, got {syn_gid}")
        self.g = g
        self.syn_gid = syn_gid
        self.anchors = (np.unique(np.asarray(anchors, dtype=np.int64))
                        if syn_gid is not None else np.empty(0, dtype=np.int64))
        self.n_total = g.n + (1 if syn_gid is not None else 0)
        self.forbidden = forbidden
        special = set(self.anchors.tolist())
        if syn_gid is not None:
            special.add(syn_gid)
        if forbidden is not None:
            special.update(forbidden)
        self._special = np.array(sorted(special), dtype=np.int64)

    def _drop_forbidden(self, u: int, nb: Array) -> Array:
        if self.forbidden is None:
            return nb
        a, b = self.forbidden
        if u == a:
            return nb[nb != b]
        if u == b:
            return nb[nb != a]
        return nb

    def neighbors_of(self, u: int) -> Array:
        if self.syn_gid is not None and u == self.syn_gid:
            nb = self.anchors
        else:
            nb = self.g.neighbors(u)
            if self.syn_gid is not None and u in self.anchors:
                nb = np.append(nb, self.syn_gid)
        return self._drop_forbidden(u, nb)

    def frontier_neighbors(self, us: Array) -> Array:
        plain = us[~np.isin(us, self._special)]
        parts = []
        if plain.size:
            parts.append(_gather_runs(self.g.offsets, self.g.targets, plain))
        for u in us[np.isin(us, self._special)]:
            parts.append(self.neighbors_of(int(u)))
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def bfs(self, source: int, cutoff: int | None = None) -> Array:
        dist = np.full(self.n_total, np.inf)
        dist[source] = 0.0
        frontier = np.array([source], dtype=np.int64)
        d = 0
        while frontier.size and (cutoff is None or d < cutoff):
            nxt = np.unique(self.frontier_neighbors(frontier))
            nxt = nxt[np.isinf(dist[nxt])]
            d += 1
            dist[nxt] = d
            frontier = nxt
        return dist


# ---------------------------------------------------------------------------
# candidate proposal


def sample_candidate_edges(pairs: list[NodePair], g: Graph, cfg: ExtractorConfig,
                           rng: np.random.Generator) -> list[CandidateEdge]:
    """Propose link targets for each pair's synthetic node.

    The pool is the union of both endpoints' closed 1-hop neighborhoods;
    max(1, floor(xi * pool size)) targets are drawn without replacement.
    """
    out: list[CandidateEdge] = []
    for i, pair in enumerate(pairs):
        pool = np.unique(np.concatenate([
            g.neighbors(pair.source), [pair.source],
            g.neighbors(pair.reference), [pair.reference]]).astype(np.int64))
        k = max(1, int(np.floor(cfg.xi * pool.size)))
        picked = rng.choice(pool, size=min(k, pool.size), replace=False)
        out.extend(CandidateEdge(i, int(t), pair) for t in np.sort(picked))
    return out


# ---------------------------------------------------------------------------
# relevance ranking


class RelevanceState:
    """Snapshot of the edge scorer used to rank pool nodes.

    Embeddings are computed once per snapshot on the base graph with a
    zeroed structural-label block, layer by layer up to the encoder's
    last layer input. A synthetic node's embedding is derived on demand
    by one aggregation step over its anchors at each level; its feedback
    onto the anchors is ignored, which keeps every candidate's scores
    independent of the others.
    """

    def __init__(self, encoder: SubgraphEncoder, g: Graph, mix: Array | None = None):
        if not encoder.layers:
            raise ContractError("encoder has no layers")
        self.g = g
        self.omega = encoder.omega
        self.last: MultiFilterLayer = encoder.layers[-1]
        self.prev_layers = encoder.layers[:-1]
        pad = encoder.layers[0].d_in - g.feature_dim
        if pad < 0:
            raise ContractError(
                f"encoder expects {encoder.layers[0].d_in} input dims, "
                f"graph features have {g.feature_dim}")
        rng = np.random.default_rng(0)  # eval mode, dropout off; never drawn from
        h = constant(np.hstack([g.features, np.zeros((g.n, pad))]))
        self.stages: list[Array] = [h.data]
        for layer in self.prev_layers:
            h = layer_forward(layer, g.offsets, g.targets, h, omega=encoder.omega,
                              drop=0.0, training=False, rng=rng,
                              uniform=encoder.uniform)
            self.stages.append(h.data)
        self.profiles = neighbor_profile_means(
            self.last, self.stages[-1], g.offsets, g.targets)
        self.mix = np.eye(3) if mix is None else np.asarray(mix, dtype=np.float64)
        if self.mix.shape != (3, 3):
            raise ContractError(f"channel mix must be 3x3, got {self.mix.shape}")

    def node_state(self, u: int) -> Array:
        return self.stages[-1][u]

    def synthetic_state(self, features: Array, anchors: tuple[int, ...]) -> Array:
        """Embedding for a node not in the graph, aggregated from its anchors."""
        pad = self.stages[0].shape[1] - features.size
        h = np.concatenate([np.asarray(features, dtype=np.float64).ravel(),
                            np.zeros(pad)])
        anchor_idx = np.asarray(anchors, dtype=np.int64)
        for stage, layer in zip(self.stages[:-1], self.prev_layers):
            h = aggregate_single_np(layer, h, stage[anchor_idx], self.omega)
        return h

    def pair_profile(self, h_u: Array, h_v: Array) -> Array:
        return edge_profiles_np(self.last, h_u.reshape(1, -1),
                                h_v.reshape(1, -1))[0]


def relevance_score(profile_k: Array, pair_profile: Array, mix: Array,
                    d_ku: float, d_kv: float) -> float:
    """Profile agreement between a pool node and the candidate endpoints,
    damped by how far the node sits from them.

    The denominator is d(k,v) + d(k,u) + min of the two; an unreachable
    endpoint pushes it to infinity and the score to zero.
    """
    den = d_ku + d_kv + min(d_ku, d_kv)
    if not np.isfinite(den):
        return 0.0
    return float(profile_k @ mix @ pair_profile) / den


def relevance_scores(pool: Array, dist_u: Array, dist_v: Array,
                     pair_profile: Array, state: RelevanceState) -> Array:
    """Scores for base-graph pool nodes, aligned with ``pool``."""
    num = state.profiles[pool] @ state.mix @ pair_profile
    den = dist_u[pool] + dist_v[pool] + np.minimum(dist_u[pool], dist_v[pool])
    out = np.zeros(pool.size)
    ok = np.isfinite(den)
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# size cap and selection


def density_cap(n_nodes: int, n_edges: int) -> int:
    """Node budget from the pool's density: ceil(n * (1 + 2e / (n(n-1)))).

    Always at least the pool size for a simple graph, so after clamping
    the whole pool survives; the cap only bites for synthetic rankings
    with a smaller budget.
    """
    if n_nodes < 2:
        raise ContractError(f"pool must have at least 2 nodes, got {n_nodes}")
    return int(np.ceil(n_nodes * (1.0 + 2.0 * n_edges / (n_nodes * (n_nodes - 1)))))


def select_top_m(pool: Array, scores: Array, centers: tuple[int, int],
                 m: int) -> Array:
    """Keep the m best-scoring pool nodes, centers always first.

    Ties break toward the smaller node id. Returns sorted global ids of
    min(m, pool size) nodes.
    """
    pool = np.asarray(pool, dtype=np.int64)
    if scores.shape != pool.shape:
        raise ContractError(f"scores {scores.shape} do not align with pool {pool.shape}")
    center_mask = np.isin(pool, np.asarray(centers, dtype=np.int64))
    rest = pool[~center_mask]
    rest_scores = scores[~center_mask]
    order = np.lexsort((rest, -rest_scores))
    ranked = np.concatenate([pool[center_mask], rest[order]])
    return np.sort(ranked[:min(m, ranked.size)])


# ---------------------------------------------------------------------------
# structural labels


def _csr_bfs(offsets: Array, targets: Array, source: int) -> Array:
    n = offsets.size - 1
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    frontier = np.array([source], dtype=np.int64)
    d = 0
    while frontier.size:
        nxt = np.unique(_gather_runs(offsets, targets, frontier))
        nxt = nxt[np.isinf(dist[nxt])]
        d += 1
        dist[nxt] = d
        frontier = nxt
    return dist


def double_radius_labels(offsets: Array, targets: Array, center_u: int,
                         center_v: int, cap: int) -> Array:
    """Distance-pair labels relative to the two centers.

    Centers get 1. A node at distances (du, dv) gets
    1 + min(du, dv) + (d//2) * ((d//2) + d%2 - 1) with d = du + dv,
    clamped at ``cap``. Nodes unreachable from either center get 0.
    The candidate edge must already be absent from the CSR.
    """
    du = _csr_bfs(offsets, targets, center_u)
    dv = _csr_bfs(offsets, targets, center_v)
    labels = np.zeros(du.size, dtype=np.int64)
    idx = np.flatnonzero(np.isfinite(du) & np.isfinite(dv))
    d = du[idx] + dv[idx]
    half = np.floor(d / 2.0)
    z = 1.0 + np.minimum(du[idx], dv[idx]) + half * (half + (d - 2.0 * half) - 1.0)
    labels[idx] = np.minimum(z, cap).astype(np.int64)
    labels[center_u] = 1
    labels[center_v] = 1
    return labels


def _onehot(labels: Array, width: int) -> Array:
    return np.eye(width)[labels]


# ---------------------------------------------------------------------------
# extraction


def _induced_edge_count(view: OverlayView, nodes: Array) -> int:
    total = 0
    for gid in nodes:
        nb = view.neighbors_of(int(gid))
        pos = np.searchsorted(nodes, nb)
        pos = np.minimum(pos, nodes.size - 1)
        total += int((nodes[pos] == nb).sum())
    return total // 2


def _induced_csr(view: OverlayView, nodes: Array) -> tuple[Array, Array]:
    offsets = np.zeros(nodes.size + 1, dtype=np.int64)
    chunks = []
    for i, gid in enumerate(nodes):
        nb = view.neighbors_of(int(gid))
        pos = np.searchsorted(nodes, nb)
        pos_c = np.minimum(pos, nodes.size - 1)
        keep = nodes[pos_c] == nb
        local = np.sort(pos_c[keep])
        chunks.append(local)
        offsets[i + 1] = offsets[i] + local.size
    targets = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return offsets, targets


def extract_subgraph(g: Graph, query: EdgeQuery, cfg: ExtractorConfig,
                     state: RelevanceState | None = None, *,
                     no_ranking: bool = False) -> Subgraph:
    """Build the enclosing subgraph for one candidate edge.

    With ``no_ranking`` the full hop-pool is kept as-is (the fixed-
    neighborhood ablation); otherwise pool nodes are ranked by relevance
    and capped by the density budget.
    """
    if query.u == query.v:
        raise ContractError("candidate edge endpoints must differ")
    synthetic = query.anchors is not None
    view = OverlayView(g, syn_gid=query.u if synthetic else None,
                       anchors=query.anchors or (),
                       forbidden=(query.u, query.v))
    dist_u = view.bfs(query.u)
    dist_v = view.bfs(query.v)
    pool = np.flatnonzero((dist_u <= cfg.hop) | (dist_v <= cfg.hop))
    edge_count = _induced_edge_count(view, pool)
    budget = density_cap(pool.size, edge_count)

    if no_ranking:
        selected = pool
    else:
        if state is None:
            raise ContractError("ranking requires a relevance state")
        if synthetic:
            if query.u_features is None:
                raise ContractError("synthetic endpoint needs u_features")
            h_u = state.synthetic_state(query.u_features, query.anchors)
        else:
            h_u = state.node_state(query.u)
        h_v = state.node_state(query.v)
        pair_prof = state.pair_profile(h_u, h_v)
        non_center = pool[(pool != query.u) & (pool != query.v)]
        scores = relevance_scores(non_center, dist_u, dist_v, pair_prof, state)
        full_pool = np.concatenate([[query.u, query.v], non_center])
        full_scores = np.concatenate([[np.inf, np.inf], scores])
        selected = select_top_m(full_pool, full_scores,
                                (query.u, query.v), budget)

    offsets, targets = _induced_csr(view, selected)
    cu = int(np.searchsorted(selected, query.u))
    cv = int(np.searchsorted(selected, query.v))
    labels = double_radius_labels(offsets, targets, cu, cv, cfg.label_cap)
    return Subgraph(node_ids=selected, offsets=offsets, targets=targets,
                    center_u=cu, center_v=cv, struct_labels=labels,
                    label_onehot=_onehot(labels, cfg.label_cap + 1))
