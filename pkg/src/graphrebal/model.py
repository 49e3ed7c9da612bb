"""Multi-filter message passing layers, the subgraph edge scorer, and the
node classifier.

Each layer carries three filter channels: a low-pass channel looking at
center and neighbor together, a high-pass channel gating on the negated
neighbor signal, and an identity channel gating on the center alone.
Per edge, the three gate activations compete through a softmax, and the
winning mix weights a ReLU of the three projected neighbor messages.
A scaled residual of the center's own features is always added, so
isolated nodes keep a signal.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant, parameter
from .errors import ConfigError, ContractError, ShapeError

if TYPE_CHECKING:
    from .subgraph import Subgraph

Array = np.ndarray


@dataclass
class MultiFilterLayer:
    w_low: Tensor     # d_in x d_out
    w_high: Tensor
    w_ident: Tensor
    g_low: Tensor     # 2*d_out x 1, gate over [center || neighbor]
    g_high: Tensor    # d_out x 1
    g_ident: Tensor
    d_in: int
    d_out: int

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "MultiFilterLayer":
        """Fan-scaled uniform init for projections, zeros for gate vectors.

        Zero gates make all three channel activations start at 0.5, so
        the softmax begins perfectly balanced.
        """
        mk = lambda: parameter(ad.glorot_uniform(rng, d_in, d_out))
        return cls(w_low=mk(), w_high=mk(), w_ident=mk(),
                   g_low=parameter(np.zeros((2 * d_out, 1))),
                   g_high=parameter(np.zeros((d_out, 1))),
                   g_ident=parameter(np.zeros((d_out, 1))),
                   d_in=d_in, d_out=d_out)

    def params(self) -> list[Tensor]:
        return [self.w_low, self.w_high, self.w_ident,
                self.g_low, self.g_high, self.g_ident]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_low": self.w_low, f"{prefix}.w_high": self.w_high,
                f"{prefix}.w_ident": self.w_ident, f"{prefix}.g_low": self.g_low,
                f"{prefix}.g_high": self.g_high, f"{prefix}.g_ident": self.g_ident}

    def frozen_copy(self) -> "MultiFilterLayer":
        return MultiFilterLayer(
            w_low=constant(self.w_low.data.copy()),
            w_high=constant(self.w_high.data.copy()),
            w_ident=constant(self.w_ident.data.copy()),
            g_low=constant(self.g_low.data.copy()),
            g_high=constant(self.g_high.data.copy()),
            g_ident=constant(self.g_ident.data.copy()),
            d_in=self.d_in, d_out=self.d_out)


def filter_coefficients(layer: MultiFilterLayer, h_center: Tensor,
                        h_neigh: Tensor) -> Tensor:
    """Softmax-normalized channel weights for one (center, neighbor) pair.

    Returns a 1x3 simplex row ordered (low, high, identity). With zero
    gate vectors every raw activation is 0.5 and the output is uniform.
    """
    if h_center.shape != (1, layer.d_in) or h_neigh.shape != (1, layer.d_in):
        raise ShapeError(
            f"filter_coefficients: need 1x{layer.d_in} rows, got "
            f"{h_center.shape} and {h_neigh.shape}")
    xl_c = ad.matmul(h_center, layer.w_low)
    xl_n = ad.matmul(h_neigh, layer.w_low)
    xh_n = ad.matmul(h_neigh, layer.w_high)
    xi_c = ad.matmul(h_center, layer.w_ident)
    d = layer.d_out
    a_low = ad.sigmoid(ad.add(ad.matmul(xl_c, ad.slice_rows(layer.g_low, 0, d)),
                              ad.matmul(xl_n, ad.slice_rows(layer.g_low, d, 2 * d))))
    a_high = ad.sigmoid(ad.matmul(ad.negate(xh_n), layer.g_high))
    a_ident = ad.sigmoid(ad.matmul(xi_c, layer.g_ident))
    return ad.softmax_rows(ad.concat_cols([a_low, a_high, a_ident]))


def _edge_arrays(offsets: Array, targets: Array) -> tuple[Array, Array]:
    n = offsets.size - 1
    src = np.repeat(np.arange(n, dtype=np.int64), np.diff(offsets))
    return src, targets


def layer_forward(layer: MultiFilterLayer, offsets: Array, targets: Array,
                  h: Tensor, *, omega: float, drop: float, training: bool,
                  rng: np.random.Generator, uniform: bool = False) -> Tensor:
    """One propagation step over a CSR graph.

    Output row u is omega times u's own (projected) features plus the
    channel-mixed messages from its neighbors. ``uniform=True`` swaps
    the gated mix for a plain degree-normalized mean of the low channel,
    which is the aggregation-ablation baseline.
    """
    n = offsets.size - 1
    if h.rows != n or h.cols != layer.d_in:
        raise ShapeError(f"layer_forward: features {h.shape} for {n} nodes, "
                         f"d_in {layer.d_in}")
    xl = ad.matmul(h, layer.w_low)
    if layer.d_in == layer.d_out:
        res = ad.scale(h, omega)
    else:
        res = ad.scale(ad.matmul(h, layer.w_ident), omega)

    if targets.size == 0:
        out = res
    elif uniform:
        src, dst = _edge_arrays(offsets, targets)
        deg = np.diff(offsets).astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        msg = ad.scale_rows(ad.relu(ad.gather_rows(xl, dst)),
                            constant(inv[src].reshape(-1, 1)))
        out = ad.add(res, ad.scatter_add_rows(msg, src, n))
    else:
        xh = ad.matmul(h, layer.w_high)
        xi = ad.matmul(h, layer.w_ident)
        src, dst = _edge_arrays(offsets, targets)
        d = layer.d_out
        a_low = ad.sigmoid(ad.add(
            ad.matmul(ad.gather_rows(xl, src), ad.slice_rows(layer.g_low, 0, d)),
            ad.matmul(ad.gather_rows(xl, dst), ad.slice_rows(layer.g_low, d, 2 * d))))
        a_high = ad.sigmoid(ad.negate(ad.matmul(ad.gather_rows(xh, dst), layer.g_high)))
        a_ident = ad.sigmoid(ad.matmul(ad.gather_rows(xi, src), layer.g_ident))
        mix = ad.softmax_rows(ad.concat_cols([a_low, a_high, a_ident]))
        msg = ad.add(
            ad.add(ad.scale_rows(ad.relu(ad.gather_rows(xl, dst)), ad.slice_cols(mix, 0, 1)),
                   ad.scale_rows(ad.relu(ad.gather_rows(xh, dst)), ad.slice_cols(mix, 1, 2))),
            ad.scale_rows(ad.relu(ad.gather_rows(xi, dst)), ad.slice_cols(mix, 2, 3)))
        out = ad.add(res, ad.scatter_add_rows(msg, src, n))
    return ad.dropout(out, drop, training, rng)


# numpy twins of the gate formulas, used where no gradients are needed
# (relevance ranking). Cross-checked against the tape versions in tests.

def _sigmoid_np(z: Array) -> Array:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ex = np.exp(z[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def edge_profiles_np(layer: MultiFilterLayer, h_center: Array,
                     h_neigh: Array) -> Array:
    """Vectorized channel weights for row-aligned center/neighbor features.

    Both inputs are (m, d_in); the result is (m, 3) rows on the simplex.
    """
    d = layer.d_out
    xl_c = h_center @ layer.w_low.data
    xl_n = h_neigh @ layer.w_low.data
    xh_n = h_neigh @ layer.w_high.data
    xi_c = h_center @ layer.w_ident.data
    a = np.hstack([
        _sigmoid_np(xl_c @ layer.g_low.data[:d] + xl_n @ layer.g_low.data[d:]),
        _sigmoid_np(-(xh_n @ layer.g_high.data)),
        _sigmoid_np(xi_c @ layer.g_ident.data),
    ])
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def neighbor_profile_means(layer: MultiFilterLayer, h_prev: Array,
                           offsets: Array, targets: Array) -> Array:
    """Mean channel profile of each node over its closed neighborhood.

    The node itself counts as a neighbor, so isolated nodes still get a
    well-defined profile.
    """
    n = offsets.size - 1
    src, dst = _edge_arrays(offsets, targets)
    src = np.concatenate([src, np.arange(n, dtype=np.int64)])
    dst = np.concatenate([dst, np.arange(n, dtype=np.int64)])
    prof = edge_profiles_np(layer, h_prev[src], h_prev[dst])
    sums = np.zeros((n, 3))
    np.add.at(sums, src, prof)
    counts = np.bincount(src, minlength=n).astype(np.float64).reshape(-1, 1)
    return sums / counts


def aggregate_single_np(layer: MultiFilterLayer, h_u: Array, h_neigh: Array,
                        omega: float) -> Array:
    """Numpy forward of one layer for a single node with explicit neighbors."""
    h_u = h_u.reshape(1, -1)
    if layer.d_in == layer.d_out:
        out = omega * h_u
    else:
        out = omega * (h_u @ layer.w_ident.data)
    if h_neigh.size:
        prof = edge_profiles_np(layer, np.broadcast_to(h_u, h_neigh.shape), h_neigh)
        stacked = np.stack([
            np.maximum(h_neigh @ layer.w_low.data, 0.0),
            np.maximum(h_neigh @ layer.w_high.data, 0.0),
            np.maximum(h_neigh @ layer.w_ident.data, 0.0),
        ], axis=1)                                   # (k, 3, d_out)
        out = out + np.einsum("kc,kcd->d", prof, stacked).reshape(1, -1)
    return out.ravel()


# ---------------------------------------------------------------------------
# subgraph scorer


@dataclass
class SubgraphEncoder:
    layers: list[MultiFilterLayer]
    w_pool: Tensor            # (sum of layer widths) x 1
    omega: float
    uniform: bool = False

    @classmethod
    def init(cls, input_dim: int, dims: tuple[int, ...], omega: float,
             rng: np.random.Generator, uniform: bool = False) -> "SubgraphEncoder":
        layers = []
        d = input_dim
        for w in dims:
            layers.append(MultiFilterLayer.init(d, w, rng))
            d = w
        return cls(layers=layers, w_pool=parameter(np.zeros((sum(dims), 1))),
                   omega=omega, uniform=uniform)

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        out.append(self.w_pool)
        return out

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layers.{i}"))
        out[f"{prefix}.w_pool"] = self.w_pool
        return out


def encode_subgraph(enc: SubgraphEncoder, sub: "Subgraph", features: Array,
                    *, training: bool, rng: np.random.Generator,
                    drop: float = 0.0) -> Tensor:
    """Score one enclosing subgraph as a 1x1 link probability in (0, 1).

    Input rows are raw features concatenated with the one-hot structural
    labels. Per-layer embeddings are concatenated, projected to a scalar
    per node, mean-pooled, and squashed. A zero pooling head therefore
    scores exactly 0.5.
    """
    if sub.node_ids.size == 0:
        raise ContractError("cannot encode an empty subgraph")
    if features.shape[0] != sub.node_ids.size:
        raise ContractError(
            f"feature rows {features.shape[0]} != subgraph size {sub.node_ids.size}")
    h = constant(np.hstack([features, sub.label_onehot]))
    per_layer = []
    for layer in enc.layers:
        h = layer_forward(layer, sub.offsets, sub.targets, h, omega=enc.omega,
                          drop=drop, training=training, rng=rng,
                          uniform=enc.uniform)
        per_layer.append(h)
    cat = per_layer[0] if len(per_layer) == 1 else ad.concat_cols(per_layer)
    return ad.sigmoid(ad.mean_all(ad.matmul(cat, enc.w_pool)))


def apply_threshold(p_values: Array, eta: float) -> Array:
    """Boolean keep mask; only scores strictly above eta survive."""
    if not (0.0 < eta < 1.0):
        raise ConfigError(f"eta must be in (0, 1), got {eta}")
    return np.asarray(p_values, dtype=np.float64) > eta


# ---------------------------------------------------------------------------
# node classifier


@dataclass
class NodeClassifier:
    layers: list[MultiFilterLayer]
    w_out: Tensor             # d_last x n_classes
    b_out: Tensor             # 1 x n_classes
    omega: float
    uniform: bool = False

    @classmethod
    def init(cls, input_dim: int, dims: tuple[int, ...], n_classes: int,
             omega: float, rng: np.random.Generator,
             uniform: bool = False) -> "NodeClassifier":
        layers = []
        d = input_dim
        for w in dims:
            layers.append(MultiFilterLayer.init(d, w, rng))
            d = w
        return cls(layers=layers,
                   w_out=parameter(ad.glorot_uniform(rng, d, n_classes)),
                   b_out=parameter(np.zeros((1, n_classes))),
                   omega=omega, uniform=uniform)

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        out.extend([self.w_out, self.b_out])
        return out

    def named(self, prefix: str = "classifier") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layers.{i}"))
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    def frozen_copy(self) -> "NodeClassifier":
        return NodeClassifier(
            layers=[l.frozen_copy() for l in self.layers],
            w_out=constant(self.w_out.data.copy()),
            b_out=constant(self.b_out.data.copy()),
            omega=self.omega, uniform=self.uniform)

    def input_gradient(self, x: Array, label: int) -> Array:
        """Gradient of this node's own cross-entropy w.r.t. its features.

        The node is treated as isolated, so only the residual path runs;
        weights are wrapped as constants and receive no gradient.
        """
        h = Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1),
                   requires_grad=True)
        cur = h
        for layer in self.layers:
            if layer.d_in == layer.d_out:
                cur = ad.scale(cur, self.omega)
            else:
                cur = ad.scale(ad.matmul(cur, constant(layer.w_ident.data)), self.omega)
        logits = ad.add_rowvec(ad.matmul(cur, constant(self.w_out.data)),
                               constant(self.b_out.data))
        if not (0 <= label < logits.cols):
            raise ContractError(f"label {label} out of range for {logits.cols} classes")
        logp = ad.log_softmax_rows(logits)
        loss = ad.negate(ad.slice_cols(logp, label, label + 1))
        ad.backward(loss)
        return h.grad.ravel().copy()


def classify_logits(cls: NodeClassifier, offsets: Array, targets: Array,
                    features: Array, *, training: bool,
                    rng: np.random.Generator, drop: float = 0.0) -> Tensor:
    """Per-node unnormalized class scores over a CSR graph. Losses should
    consume these directly; normalizing first loses precision on
    saturated rows."""
    h = constant(features)
    for layer in cls.layers:
        h = layer_forward(layer, offsets, targets, h, omega=cls.omega,
                          drop=drop, training=training, rng=rng,
                          uniform=cls.uniform)
    return ad.add_rowvec(ad.matmul(h, cls.w_out), cls.b_out)


def classify_nodes(cls: NodeClassifier, offsets: Array, targets: Array,
                   features: Array, *, training: bool,
                   rng: np.random.Generator, drop: float = 0.0) -> Tensor:
    """Per-node class probabilities (rows sum to one) over a CSR graph."""
    return ad.softmax_rows(classify_logits(cls, offsets, targets, features,
                                           training=training, rng=rng,
                                           drop=drop))


# ---------------------------------------------------------------------------
# checkpoints: length-prefixed name/shape/payload records, little-endian


_MAGIC = b"GRB1"


def save_checkpoint(path: str, arrays: dict[str, Array],
                    meta: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(arrays) + (1 if meta is not None else 0)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BI", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            nb = b"__meta__"
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BQ", 1, len(blob)))
            f.write(blob)


def load_checkpoint(path: str) -> tuple[dict[str, Array], dict]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", f.read(4))
        arrays: dict[str, Array] = {}
        meta: dict = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (kind,) = struct.unpack("<B", f.read(1))
            if kind == 0:
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
                size = int(np.prod(shape)) if ndim else 1
                arrays[name] = np.frombuffer(
                    f.read(8 * size), dtype="<f8").reshape(shape).copy()
            elif kind == 1:
                (blen,) = struct.unpack("<Q", f.read(8))
                meta = json.loads(f.read(blen).decode("utf-8"))
            else:
                raise ContractError(f"unknown record kind {kind} in {path}")
    return arrays, meta


def restore_parameters(named: dict[str, Tensor], arrays: dict[str, Array]) -> None:
    """Copy checkpoint arrays into live tensors, matching by name."""
    for name, t in named.items():
        if name not in arrays:
            raise ContractError(f"checkpoint is missing parameter {name}")
        if arrays[name].shape != t.data.shape:
            raise ShapeError(
                f"checkpoint {name}: shape {arrays[name].shape} != {t.data.shape}")
        t.data[:] = arrays[name]
