"""Command line front end.

Subcommands: run, sweep, ablate, gen-sbm, stats, convert-citations.
Exit codes: 0 success, 1 bad configuration or usage, 2 dataset
ingestion failure, 3 training diverged.

The output directory defaults to $GRAPHREBAL_OUT when set, else
``results``.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys

from .config import (ABLATIONS, ExperimentConfig, HyperParams, load_config)
from .dataio import (convert_citation_files, dataset_stats, load_dataset_dir,
                     write_dataset_dir)
from .errors import ConfigError, GraphRebalError, IngestionError, TrainingDiverged
from .experiment import run_ablations, run_experiment, sweep
from .graph import ImbalanceSpec, SbmSpec, generate_sbm


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems share the config exit code
        raise ConfigError(message)


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def _default_out() -> str:
    return os.environ.get("GRAPHREBAL_OUT", "results")


_HYPER_FLOAT = ("lr", "weight_decay", "dropout", "lam", "eta", "zeta", "xi",
                "kappa", "omega")
_HYPER_INT = ("epochs", "patience", "batch_size", "ig_steps", "hop",
              "proj_dim", "label_cap", "warmup_epochs", "ig_refresh")


def _add_experiment_flags(p: argparse.ArgumentParser,
                          with_ablation: bool = True) -> None:
    p.add_argument("--config", help="INI config file; flags override it")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--sbm-sizes", help="block sizes, e.g. 300,300,30")
    p.add_argument("--sbm-intra", type=float, help="within-block edge prob")
    p.add_argument("--sbm-inter", type=float, help="between-block edge prob")
    p.add_argument("--sbm-feature-dim", type=int)
    p.add_argument("--sbm-separation", type=float)
    p.add_argument("--sbm-noise", type=float)
    p.add_argument("--sbm-seed", type=int)
    p.add_argument("--minority", help="minority class ids, e.g. 1,2")
    p.add_argument("--im-ratio", type=float)
    p.add_argument("--majority-train", type=int)
    p.add_argument("--setting", choices=("semi", "supervised"))
    p.add_argument("--val-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    if with_ablation:
        p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--repeat", type=int)
    p.add_argument("--seeds", help="explicit seeds, e.g. 0,1,2")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dims", help="layer widths, e.g. 64,32")
    for name in _HYPER_FLOAT:
        p.add_argument("--" + name.replace("_", "-"), type=float)
    for name in _HYPER_INT:
        p.add_argument("--" + name.replace("_", "-"), type=int)
    p.add_argument("--drop-isolated-synthetic",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--random-channel-mix",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--out", help="output directory")


def _sbm_from_args(args) -> SbmSpec | None:
    if args.sbm_sizes is None:
        return None
    if args.sbm_intra is None or args.sbm_inter is None:
        raise ConfigError("--sbm-sizes needs --sbm-intra and --sbm-inter")
    kw = dict(sizes=_parse_ints(args.sbm_sizes), p_intra=args.sbm_intra,
              p_inter=args.sbm_inter)
    for flag, key in (("sbm_feature_dim", "feature_dim"),
                      ("sbm_separation", "separation"),
                      ("sbm_noise", "noise"), ("sbm_seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            kw[key] = v
    return SbmSpec(**kw)


def _rebuild(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    kw = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    kw.update(changes)
    return ExperimentConfig(**kw)


def _experiment_from_args(args, with_ablation: bool = True) -> ExperimentConfig:
    sbm = _sbm_from_args(args)
    if args.config:
        cfg = load_config(args.config)
    else:
        if args.minority is None:
            raise ConfigError("--minority is required without --config")
        if (args.dataset is None) == (sbm is None):
            raise ConfigError("give exactly one of --dataset or --sbm-sizes")
        cfg = ExperimentConfig(
            imbalance=ImbalanceSpec(minority_classes=_parse_ints(args.minority)),
            hyper=HyperParams(), dataset_dir=args.dataset, sbm=sbm)

    changes: dict = {}
    if args.config:
        if args.dataset is not None:
            changes.update(dataset_dir=args.dataset, sbm=None)
        elif sbm is not None:
            changes.update(dataset_dir=None, sbm=sbm)

    imb = cfg.imbalance
    if args.minority is not None:
        imb = dataclasses.replace(imb,
                                  minority_classes=_parse_ints(args.minority))
    if args.im_ratio is not None:
        imb = dataclasses.replace(imb, im_ratio=args.im_ratio)
    if args.majority_train is not None:
        imb = dataclasses.replace(imb, majority_train=args.majority_train)
    if imb is not cfg.imbalance:
        changes["imbalance"] = imb

    hyper = copy.copy(cfg.hyper)
    touched = False
    for name in _HYPER_FLOAT + _HYPER_INT + (
            "seed", "drop_isolated_synthetic", "random_channel_mix"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(hyper, name, v)
            touched = True
    if args.hidden_dims is not None:
        hyper.hidden_dims = _parse_ints(args.hidden_dims)
        touched = True
    if touched:
        hyper.validate()
        changes["hyper"] = hyper

    for name in ("setting", "val_per_class", "test_per_class", "repeat"):
        v = getattr(args, name)
        if v is not None:
            changes[name] = v
    if with_ablation and getattr(args, "ablation", None) is not None:
        changes["ablation"] = args.ablation
    if args.seeds is not None:
        changes["seeds"] = _parse_ints(args.seeds)
    if changes:
        cfg = _rebuild(cfg, **changes)
    return cfg


def _print_summary(tag: str, summary: dict) -> None:
    m, s = summary["mean"], summary["std"]
    print(f"{tag}: acc {100 * m['accuracy']:.2f} +/- {100 * s['accuracy']:.2f}"
          f"  f1 {100 * m['macro_f1']:.2f} +/- {100 * s['macro_f1']:.2f}"
          f"  auc {100 * m['macro_auc']:.2f} +/- {100 * s['macro_auc']:.2f}"
          f"  ({summary['n_runs']} runs)")


def _cmd_run(args) -> int:
    cfg = _experiment_from_args(args)
    out = args.out or _default_out()
    report = run_experiment(cfg, out_dir=out)
    _print_summary(cfg.ablation, report.summary())
    print(f"wrote {os.path.join(out, 'results.json')} and metrics.csv")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _experiment_from_args(args)
    out = args.out or _default_out()
    values = _parse_floats(args.values) if args.values else None
    results = sweep(cfg, args.param, values=values, out_dir=out)
    for value, report in results:
        _print_summary(f"{args.param}={value}", report.summary())
    print(f"wrote {os.path.join(out, 'sweep.csv')}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_from_args(args, with_ablation=False)
    out = args.out or _default_out()
    reports = run_ablations(cfg, out_dir=out)
    for name, report in reports.items():
        _print_summary(name, report.summary())
    print(f"wrote {os.path.join(out, 'ablations.csv')}")
    return 0


def _cmd_gen_sbm(args) -> int:
    spec = SbmSpec(sizes=_parse_ints(args.sizes), p_intra=args.intra,
                   p_inter=args.inter, feature_dim=args.feature_dim,
                   separation=args.separation, noise=args.noise,
                   seed=args.seed)
    g = generate_sbm(spec)
    write_dataset_dir(args.out, g)
    print(json.dumps(dataset_stats(g), indent=2))
    return 0


def _cmd_stats(args) -> int:
    g, remap = load_dataset_dir(args.dataset)
    stats = dataset_stats(g)
    stats["label_remap"] = {str(k): v for k, v in remap.items()}
    print(json.dumps(stats, indent=2))
    return 0


def _cmd_convert(args) -> int:
    n, m, c = convert_citation_files(args.content, args.cites, args.out)
    print(f"wrote {args.out}: {n} nodes, {m} edges, {c} classes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphrebal",
                description="imbalanced node classification via synthetic "
                            "node mixing and learned edge scoring")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="train and evaluate one configuration")
    _add_experiment_flags(sp)
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("sweep", help="repeat runs across one knob")
    sp.add_argument("--param", required=True,
                    choices=("im_ratio", "dropout", "xi"))
    sp.add_argument("--values", help="comma-separated values; default grid")
    _add_experiment_flags(sp)
    sp.set_defaults(fn=_cmd_sweep)

    sp = sub.add_parser("ablate", help="run all pipeline variants")
    _add_experiment_flags(sp, with_ablation=False)
    sp.set_defaults(fn=_cmd_ablate)

    sp = sub.add_parser("gen-sbm", help="write a synthetic block-model dataset")
    sp.add_argument("--sizes", required=True)
    sp.add_argument("--intra", type=float, required=True)
    sp.add_argument("--inter", type=float, required=True)
    sp.add_argument("--feature-dim", type=int, default=8)
    sp.add_argument("--separation", type=float, default=2.0)
    sp.add_argument("--noise", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_gen_sbm)

    sp = sub.add_parser("stats", help="describe a dataset directory")
    sp.add_argument("dataset")
    sp.set_defaults(fn=_cmd_stats)

    sp = sub.add_parser("convert-citations",
                        help="convert raw citation files to a dataset dir")
    sp.add_argument("--content", required=True)
    sp.add_argument("--cites", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_convert)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except IngestionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except GraphRebalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
