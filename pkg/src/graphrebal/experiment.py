"""Experiment drivers: repeated seeded runs, parameter sweeps, ablations.

Each seeded run draws a fresh imbalanced split (split randomness and
training randomness both come from that seed), trains the full pipeline,
and records best-checkpoint test metrics. Aggregates are mean and
population std across seeds.
"""
from __future__ import annotations

import copy
import dataclasses
import time

import numpy as np

from .config import ABLATIONS, ExperimentConfig
from .dataio import (ExperimentReport, RunRecord, dataset_stats, emit_report,
                     emit_sweep, load_dataset_dir)
from .errors import ConfigError
from .graph import Graph, generate_sbm, make_imbalanced_split
from .pipeline import PipelineResult, run_pipeline

DROPOUT_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))
EDGE_FRACTION_SWEEP = (0.01, 0.1, 0.3, 0.5, 0.7, 0.9)
IMRATIO_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)

_SWEEPABLE = {"dropout": DROPOUT_SWEEP, "xi": EDGE_FRACTION_SWEEP}


def load_graph(cfg: ExperimentConfig) -> Graph:
    if cfg.dataset_dir is not None:
        g, _ = load_dataset_dir(cfg.dataset_dir)
        return g
    return generate_sbm(cfg.sbm)


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    d = {
        "setting": cfg.setting, "ablation": cfg.ablation,
        "repeat": cfg.repeat, "seeds": cfg.seed_list(),
        "val_per_class": cfg.val_per_class, "test_per_class": cfg.test_per_class,
        "dataset_dir": cfg.dataset_dir,
        "sbm": dataclasses.asdict(cfg.sbm) if cfg.sbm else None,
        "imbalance": {
            "minority_classes": sorted(cfg.imbalance.minority_classes),
            "im_ratio": cfg.imbalance.im_ratio,
            "majority_train": cfg.imbalance.majority_train,
        },
        "hyper": dataclasses.asdict(cfg.hyper),
    }
    if d["sbm"] and d["sbm"].get("means") is not None:
        d["sbm"]["means"] = np.asarray(d["sbm"]["means"]).tolist()
    d["hyper"]["hidden_dims"] = list(d["hyper"]["hidden_dims"])
    return d


def run_seed(g: Graph, cfg: ExperimentConfig, seed: int,
             log_path: str | None = None) -> tuple[PipelineResult, RunRecord]:
    """One split + one training run under a single seed."""
    split_rng = np.random.default_rng(seed)
    train, val, test = make_imbalanced_split(
        g, cfg.imbalance, cfg.setting, val_per_class=cfg.val_per_class,
        test_per_class=cfg.test_per_class, rng=split_rng)
    gm = g.with_masks(train, val, test)
    hp = copy.copy(cfg.hyper)
    hp.seed = seed
    t0 = time.perf_counter()
    result = run_pipeline(gm, cfg.imbalance, hp, cfg.ablation,
                          log_path=log_path)
    record = RunRecord(
        seed=seed, metrics=result.test_metrics.as_dict(),
        best_epoch=result.best_epoch, epochs_run=result.epochs_run,
        n_synthetic=result.n_synthetic,
        n_accepted_edges=len(result.accepted_edges),
        seconds=time.perf_counter() - t0)
    return result, record


def run_experiment(cfg: ExperimentConfig, g: Graph | None = None,
                   out_dir: str | None = None) -> ExperimentReport:
    """All seeds of one configuration; optionally emit report files."""
    if g is None:
        g = load_graph(cfg)
    report = ExperimentReport(config=_config_snapshot(cfg),
                              dataset=dataset_stats(g), ablation=cfg.ablation)
    for seed in cfg.seed_list():
        _, record = run_seed(g, cfg, seed)
        report.runs.append(record)
    if out_dir is not None:
        emit_report(out_dir, report)
    return report


def _swept_copies(cfg: ExperimentConfig, param: str,
                  values) -> list[tuple[float, ExperimentConfig]]:
    out = []
    for v in values:
        c = copy.copy(cfg)
        c.hyper = copy.copy(cfg.hyper)
        c.imbalance = cfg.imbalance
        if param == "im_ratio":
            c.imbalance = dataclasses.replace(cfg.imbalance, im_ratio=float(v))
        else:
            setattr(c.hyper, param, float(v))
            c.hyper.validate()
        out.append((float(v), c))
    return out


def sweep(cfg: ExperimentConfig, param: str, values=None,
          out_dir: str | None = None,
          g: Graph | None = None) -> list[tuple[float, ExperimentReport]]:
    """Repeat the experiment across values of one knob.

    ``param`` is "im_ratio" or one of the sweepable hyperparameters
    (dropout, xi). Defaults cover the standard grids.
    """
    if values is None:
        if param == "im_ratio":
            values = IMRATIO_SWEEP
        elif param in _SWEEPABLE:
            values = _SWEEPABLE[param]
        else:
            raise ConfigError(
                f"no default sweep for {param!r}; pass values explicitly")
    if param != "im_ratio" and param not in _SWEEPABLE:
        raise ConfigError(
            f"sweepable parameters: im_ratio, {', '.join(_SWEEPABLE)}")
    if g is None:
        g = load_graph(cfg)
    results = []
    for value, c in _swept_copies(cfg, param, values):
        results.append((value, run_experiment(c, g=g)))
    if out_dir is not None:
        emit_sweep(out_dir, param,
                   [(v, r.summary()) for v, r in results])
    return results


def run_ablations(cfg: ExperimentConfig, g: Graph | None = None,
                  out_dir: str | None = None) -> dict[str, ExperimentReport]:
    """Run every pipeline variant under identical seeds and splits."""
    if g is None:
        g = load_graph(cfg)
    out: dict[str, ExperimentReport] = {}
    for name in ABLATIONS:
        c = copy.copy(cfg)
        c.ablation = name
        out[name] = run_experiment(c, g=g)
    if out_dir is not None:
        import csv
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablations.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "accuracy_mean", "accuracy_std",
                        "macro_f1_mean", "macro_f1_std",
                        "macro_auc_mean", "macro_auc_std"])
            for name, rep in out.items():
                s = rep.summary()
                w.writerow([name] + [
                    f"{100 * s[tag][k]:.2f}"
                    for k in ("accuracy", "macro_f1", "macro_auc")
                    for tag in ("mean", "std")])
        for name, rep in out.items():
            emit_report(os.path.join(out_dir, name), rep)
    return out
