"""Synthetic minority-node generation.

A source node is drawn uniformly from a minority class, a reference
node from the whole labeled training set under a class-size-damped
distribution, and their features are fused coordinate-by-coordinate:
a coordinate comes from the reference node only when the pair is
similar enough relative to how much the classifier relies on that
coordinate (feature importance via integrated gradients).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ConfigError, ContractError, SamplingError
from .graph import Graph, ImbalanceSpec

Array = np.ndarray


@dataclass(frozen=True)
class MixerConfig:
    kappa: float = 1.05      # similarity margin on the mask threshold
    zeta: float = 1.0        # synthetic nodes per existing minority train node
    ig_steps: int = 50       # Riemann steps for integrated gradients
    proj_dim: int = 64       # output width of the similarity projection

    def __post_init__(self):
        if self.zeta < 0:
            raise ConfigError(f"zeta must be >= 0, got {self.zeta}")
        if self.ig_steps < 1:
            raise ConfigError(f"ig_steps must be >= 1, got {self.ig_steps}")
        if self.kappa <= 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.proj_dim < 1:
            raise ConfigError(f"proj_dim must be >= 1, got {self.proj_dim}")


@dataclass
class NodePair:
    source: int                      # minority node contributing the label
    reference: int                   # labeled train node mixed in
    similarity: float | None = None  # squashed projected distance, in (0, 1]


@dataclass
class SyntheticNode:
    features: Array
    label: int
    pair: NodePair


class InputGradientModel(Protocol):
    """Anything that can differentiate its training loss w.r.t. one input row."""

    def input_gradient(self, x: Array, label: int) -> Array: ...


def train_nodes_by_class(g: Graph) -> dict[int, Array]:
    if g.labels is None or g.train_mask is None:
        raise ContractError("pair sampling needs labels and a train mask")
    out: dict[int, Array] = {}
    idx = np.flatnonzero(g.train_mask)
    for c in np.unique(g.labels[idx]):
        out[int(c)] = idx[g.labels[idx] == c]
    return out


def reference_weights(candidate_classes: Array, class_sizes: dict[int, int]) -> Array:
    """Per-candidate sampling weights damped by class size.

    A node in a class of size s gets raw mass log(s+1) / ((s+1) * Z)
    where Z sums log(s+1) over classes; the raw masses do not total one,
    so they are renormalized into a proper distribution.
    """
    z = sum(np.log(s + 1.0) for s in class_sizes.values())
    if z <= 0:
        raise SamplingError("reference distribution is degenerate: no labeled classes")
    raw = np.array([np.log(class_sizes[int(c)] + 1.0) / ((class_sizes[int(c)] + 1.0) * z)
                    for c in candidate_classes])
    return raw / raw.sum()


def sample_pairs(g: Graph, spec: ImbalanceSpec, cfg: MixerConfig,
                 rng: np.random.Generator) -> list[NodePair]:
    """Draw source/reference pairs, ceil(zeta * |train_c|) per minority class c.

    Sources are uniform within their class; references are drawn with
    replacement from all labeled training nodes under the damped
    distribution, so large classes do not drown out small ones.
    """
    by_class = train_nodes_by_class(g)
    sizes = {c: v.size for c, v in by_class.items()}
    candidates = np.sort(np.concatenate(list(by_class.values())))
    weights = reference_weights(g.labels[candidates], sizes)
    pairs: list[NodePair] = []
    for c in sorted(spec.minority_classes):
        pool = by_class.get(int(c))
        if pool is None or pool.size == 0:
            raise SamplingError(f"minority class {c} has no training nodes")
        count = int(np.ceil(cfg.zeta * pool.size))
        if count == 0:
            continue
        sources = rng.choice(pool, size=count, replace=True)
        refs = rng.choice(candidates, size=count, replace=True, p=weights)
        pairs.extend(NodePair(int(s), int(t)) for s, t in zip(sources, refs))
    return pairs


def integrated_gradient(model: InputGradientModel, x: Array, label: int,
                        steps: int) -> Array:
    """Feature importance of x for its label, zero baseline.

    Riemann sum over the straight path from the origin: average the loss
    gradient at (s/steps) * x for s = 1..steps, then scale by x itself.
    Exact for losses affine in x at any step count.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x, dtype=np.float64).ravel()
    acc = np.zeros_like(x)
    for s in range(1, steps + 1):
        acc += np.asarray(model.input_gradient((s / steps) * x, label)).ravel()
    return (acc / steps) * x


def pair_similarity(x_s: Array, x_t: Array, w_proj: Array) -> float:
    """Squashed distance between projected features: 1 / (1 + ||(x_s - x_t) W||)."""
    diff = (np.asarray(x_s, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)).ravel()
    dist = float(np.linalg.norm(diff @ w_proj))
    return 1.0 / (1.0 + dist)


def build_mask(similarity: float, importance: Array, kappa: float) -> Array:
    """Coordinates where the scaled similarity strictly beats importance.

    1.0 marks coordinates taken from the reference node, 0.0 from the
    source. Ties go to the source.
    """
    if not (0.0 < similarity <= 1.0):
        raise ContractError(f"similarity must be in (0, 1], got {similarity}")
    return (kappa * similarity - np.asarray(importance, dtype=np.float64) > 0.0) \
        .astype(np.float64)


def mix_features(x_s: Array, x_t: Array, mask: Array) -> Array:
    """Coordinate-wise selection: mask picks the reference, rest stays source."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_s.shape != x_t.shape or x_s.shape != mask.shape:
        raise ContractError(
            f"feature/mask shapes differ: {x_s.shape}, {x_t.shape}, {mask.shape}")
    return (1.0 - mask) * x_s + mask * x_t


def synthesize_nodes(g: Graph, spec: ImbalanceSpec, cfg: MixerConfig,
                     model: InputGradientModel, w_proj: Array,
                     rng: np.random.Generator,
                     importance_cache: dict[int, Array] | None = None
                     ) -> list[SyntheticNode]:
    """Full generation pass: sample pairs, mask, and mix.

    ``importance_cache`` maps node id to its importance vector for the
    current model snapshot; pass the same dict across epochs between
    snapshot refreshes to avoid recomputing integrated gradients.
    """
    pairs = sample_pairs(g, spec, cfg, rng)
    out: list[SyntheticNode] = []
    for pair in pairs:
        x_s = g.features[pair.source]
        x_t = g.features[pair.reference]
        if importance_cache is not None and pair.reference in importance_cache:
            importance = importance_cache[pair.reference]
        else:
            importance = integrated_gradient(
                model, x_t, int(g.labels[pair.reference]), cfg.ig_steps)
            if importance_cache is not None:
                importance_cache[pair.reference] = importance
        pair.similarity = pair_similarity(x_s, x_t, w_proj)
        mask = build_mask(pair.similarity, importance, cfg.kappa)
        out.append(SyntheticNode(features=mix_features(x_s, x_t, mask),
                                 label=int(g.labels[pair.source]), pair=pair))
    return out
