"""Dataset directory ingestion and result file emission.

A dataset directory holds three plain-text files:

  edges.tsv     one undirected edge per line, two tab-separated node ids;
                blank lines and lines starting with '#' are skipped
  features.csv  row i is the comma-separated feature vector of node i
  labels.csv    row i is the integer class label of node i

Node count comes from labels.csv; features.csv must have the same number
of rows and edges.tsv may only reference ids below it. Labels are
remapped to a dense 0..C-1 range (sorted by original value) and the
mapping is returned alongside the graph.

Results land in an output directory as results.json (full precision,
includes wall times) and metrics.csv (percentages, two decimals, no
timing, so identical runs produce identical bytes).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import IngestionError
from .graph import Graph, edge_homophily, from_edge_list, node_homophily

Array = np.ndarray


def _read_lines(path: str) -> list[tuple[int, str]]:
    if not os.path.isfile(path):
        raise IngestionError(f"missing file: {path}")
    out = []
    with open(path) as f:
        for i, raw in enumerate(f, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                out.append((i, line))
    return out


def load_dataset_dir(path: str) -> tuple[Graph, dict[int, int]]:
    """Read a dataset directory; returns the graph and the label remap."""
    if not os.path.isdir(path):
        raise IngestionError(f"not a dataset directory: {path}")

    raw_labels = []
    for lineno, line in _read_lines(os.path.join(path, "labels.csv")):
        try:
            raw_labels.append(int(line))
        except ValueError:
            raise IngestionError(
                f"labels.csv line {lineno}: expected an integer, got {line!r}")
    if not raw_labels:
        raise IngestionError("labels.csv is empty")
    n = len(raw_labels)

    rows = []
    width = None
    for lineno, line in _read_lines(os.path.join(path, "features.csv")):
        try:
            vec = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise IngestionError(
                f"features.csv line {lineno}: non-numeric value in {line!r}")
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise IngestionError(
                f"features.csv line {lineno}: expected {width} values, "
                f"got {len(vec)}")
        rows.append(vec)
    if len(rows) != n:
        raise IngestionError(
            f"features.csv has {len(rows)} rows but labels.csv has {n}")
    features = np.asarray(rows, dtype=np.float64)

    edges = []
    for lineno, line in _read_lines(os.path.join(path, "edges.tsv")):
        parts = line.split("\t")
        if len(parts) != 2:
            raise IngestionError(
                f"edges.tsv line {lineno}: expected two tab-separated ids, "
                f"got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise IngestionError(
                f"edges.tsv line {lineno}: non-integer id in {line!r}")
        if not (0 <= u < n and 0 <= v < n):
            raise IngestionError(
                f"edges.tsv line {lineno}: id out of range for {n} nodes")
        edges.append((u, v))
    edge_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    uniq = sorted(set(raw_labels))
    remap = {orig: k for k, orig in enumerate(uniq)}
    labels = np.array([remap[x] for x in raw_labels], dtype=np.int64)
    g = from_edge_list(edge_arr, n, features=features, labels=labels)
    return g, remap


def write_dataset_dir(path: str, g: Graph) -> None:
    """Write a graph out in the dataset directory format."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "edges.tsv"), "w") as f:
        for u, v in g.to_edge_list():
            f.write(f"{u}\t{v}\n")
    with open(os.path.join(path, "features.csv"), "w") as f:
        for row in g.features:
            f.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(os.path.join(path, "labels.csv"), "w") as f:
        for y in (g.labels if g.labels is not None
                  else np.zeros(g.n, dtype=np.int64)):
            f.write(f"{int(y)}\n")


def convert_citation_files(content_path: str, cites_path: str,
                           out_dir: str) -> tuple[int, int, int]:
    """Convert raw citation-network files into a dataset directory.

    ``content_path`` lines: <paper_id> <word_0> ... <word_k> <class_name>.
    ``cites_path`` lines: <cited_id> <citing_id>. Papers are numbered by
    sorted id; class names map to indices in sorted order; citation pairs
    whose endpoints are unknown are dropped. Returns (nodes, edges kept,
    classes).
    """
    ids: list[str] = []
    feats: list[list[float]] = []
    names: list[str] = []
    for lineno, line in _read_lines(content_path):
        parts = line.split()
        if len(parts) < 3:
            raise IngestionError(
                f"{content_path} line {lineno}: expected id, features, class")
        ids.append(parts[0])
        feats.append([float(tok) for tok in parts[1:-1]])
        names.append(parts[-1])

    order = sorted(range(len(ids)), key=lambda i: ids[i])
    index = {ids[i]: rank for rank, i in enumerate(order)}
    classes = {name: k for k, name in enumerate(sorted(set(names)))}

    n = len(ids)
    width = len(feats[0])
    features = np.zeros((n, width))
    labels = np.zeros(n, dtype=np.int64)
    for i in order:
        if len(feats[i]) != width:
            raise IngestionError(
                f"{content_path}: inconsistent feature width for id {ids[i]}")
        features[index[ids[i]]] = feats[i]
        labels[index[ids[i]]] = classes[names[i]]

    edges = []
    for lineno, line in _read_lines(cites_path):
        parts = line.split()
        if len(parts) != 2:
            raise IngestionError(
                f"{cites_path} line {lineno}: expected two ids, got {line!r}")
        a, b = parts
        if a in index and b in index and a != b:
            edges.append((index[a], index[b]))

    g = from_edge_list(np.asarray(edges, dtype=np.int64).reshape(-1, 2), n,
                       features=features, labels=labels)
    write_dataset_dir(out_dir, g)
    return n, g.num_edges, len(classes)


# ---------------------------------------------------------------------------
# result emission


@dataclass
class RunRecord:
    seed: int
    metrics: dict
    best_epoch: int
    epochs_run: int
    n_synthetic: int
    n_accepted_edges: int
    seconds: float


@dataclass
class ExperimentReport:
    config: dict
    dataset: dict
    ablation: str
    runs: list[RunRecord] = field(default_factory=list)

    def _series(self, key: str) -> Array:
        return np.array([r.metrics[key] for r in self.runs])

    def summary(self) -> dict:
        keys = ("accuracy", "macro_f1", "macro_auc")
        mean = {k: float(self._series(k).mean()) for k in keys}
        std = {k: float(self._series(k).std()) for k in keys}
        return {"mean": mean, "std": std, "n_runs": len(self.runs)}

    def as_dict(self) -> dict:
        return {
            "config": self.config, "dataset": self.dataset,
            "ablation": self.ablation,
            "runs": [vars(r) for r in self.runs],
            **self.summary(),
        }


def dataset_stats(g: Graph) -> dict:
    counts = (np.bincount(g.labels, minlength=g.num_classes).tolist()
              if g.labels is not None else [])
    return {
        "nodes": g.n, "edges": g.num_edges, "feature_dim": g.feature_dim,
        "classes": g.num_classes if g.labels is not None else 0,
        "class_counts": counts,
        "edge_homophily": edge_homophily(g) if g.labels is not None else None,
        "node_homophily": node_homophily(g) if g.labels is not None else None,
    }


def emit_report(out_dir: str, report: ExperimentReport) -> None:
    """Write results.json and metrics.csv for one experiment."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.json"), "w") as f:
        json.dump(report.as_dict(), f, indent=2)

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "accuracy", "macro_f1", "macro_auc",
                    "best_epoch", "n_synthetic", "n_accepted_edges"])
        for r in report.runs:
            w.writerow([r.seed,
                        f"{100 * r.metrics['accuracy']:.2f}",
                        f"{100 * r.metrics['macro_f1']:.2f}",
                        f"{100 * r.metrics['macro_auc']:.2f}",
                        r.best_epoch, r.n_synthetic, r.n_accepted_edges])
        s = report.summary()
        for tag in ("mean", "std"):
            w.writerow([tag,
                        f"{100 * s[tag]['accuracy']:.2f}",
                        f"{100 * s[tag]['macro_f1']:.2f}",
                        f"{100 * s[tag]['macro_auc']:.2f}", "", "", ""])


def emit_sweep(out_dir: str, param: str,
               rows: list[tuple[float, dict]]) -> None:
    """Write sweep.csv: one row of mean/std metrics per swept value."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([param, "accuracy_mean", "accuracy_std", "macro_f1_mean",
                    "macro_f1_std", "macro_auc_mean", "macro_auc_std"])
        for value, s in rows:
            w.writerow([value] + [
                f"{100 * s[tag][k]:.2f}" for k in
                ("accuracy", "macro_f1", "macro_auc") for tag in ("mean", "std")
            ])
