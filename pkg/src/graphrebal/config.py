"""Hyperparameters, experiment configuration, and the config file parser.

Config files are flat INI-style key/value text with sections. Grammar:

    # comment lines start with '#' or ';'
    [section]
    key = value

Recognized sections and keys (all optional unless noted):

    [dataset]   path
    [sbm]       sizes (comma ints), intra, inter, feature_dim,
                separation, noise, seed
    [imbalance] minority (comma ints, required), im_ratio, majority_train
    [split]     setting (semi|supervised), val_per_class, test_per_class
    [train]     any HyperParams field name
    [run]       ablation (full|no-ufm|no-ase|no-mse), repeat, seeds
                (comma ints), out_dir, save_checkpoints (bool)

Exactly one of [dataset] and [sbm] must be present. Unknown keys are
rejected with their full section.key path.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .graph import ImbalanceSpec, SbmSpec
from .mixer import MixerConfig
from .subgraph import ExtractorConfig

ABLATIONS = ("full", "no-ufm", "no-ase", "no-mse")


@dataclass
class HyperParams:
    """Training knobs. Defaults follow the reference configuration;
    heterophilic benchmarks conventionally raise lr to 0.01."""
    lr: float = 0.001
    weight_decay: float = 5e-4
    dropout: float = 0.7
    epochs: int = 2000
    patience: int = 5
    lam: float = 1e-6        # classification share of the total loss, in (0, 1]
    eta: float = 0.5         # edge acceptance threshold, strict
    batch_size: int = 32     # reconstruction edges per step
    zeta: float = 1.0        # synthetic nodes per minority train node
    xi: float = 0.3          # candidate edge fraction
    kappa: float = 1.05      # mixing mask margin
    omega: float = 0.3       # residual strength
    ig_steps: int = 50       # integration steps for feature importance
    hop: int = 2             # subgraph pooling radius
    hidden_dims: tuple[int, ...] = (64, 32)
    proj_dim: int = 64       # similarity projection width
    label_cap: int = 10      # structural label clamp
    warmup_epochs: int = 10  # classifier-only epochs before augmentation
    ig_refresh: int = 10     # epochs between feature-importance snapshots
    drop_isolated_synthetic: bool = False
    random_channel_mix: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (0.0 < self.lam <= 1.0):
            raise ConfigError(f"lam must be in (0, 1], got {self.lam}")
        if not (0.0 < self.eta < 1.0):
            raise ConfigError(f"eta must be in (0, 1), got {self.eta}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.ig_refresh < 1:
            raise ConfigError(f"ig_refresh must be >= 1, got {self.ig_refresh}")
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must name at least one layer width")
        # delegate range checks for the shared knobs
        self.mixer_config()
        self.extractor_config()

    def mixer_config(self) -> MixerConfig:
        return MixerConfig(kappa=self.kappa, zeta=self.zeta,
                           ig_steps=self.ig_steps, proj_dim=self.proj_dim)

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(xi=self.xi, hop=self.hop, label_cap=self.label_cap,
                               random_channel_mix=self.random_channel_mix)


@dataclass
class ExperimentConfig:
    imbalance: ImbalanceSpec
    hyper: HyperParams = field(default_factory=HyperParams)
    dataset_dir: str | None = None
    sbm: SbmSpec | None = None
    setting: str = "semi"
    val_per_class: int = 10
    test_per_class: int = 20
    ablation: str = "full"
    repeat: int = 1
    seeds: tuple[int, ...] | None = None
    out_dir: str = "results"
    save_checkpoints: bool = False

    def __post_init__(self):
        if (self.dataset_dir is None) == (self.sbm is None):
            raise ConfigError("exactly one of dataset_dir and sbm must be set")
        if self.setting not in ("semi", "supervised"):
            raise ConfigError(f"setting must be semi or supervised, got {self.setting}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation}")
        if self.repeat < 1:
            raise ConfigError(f"repeat must be >= 1, got {self.repeat}")

    def seed_list(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.hyper.seed + i for i in range(self.repeat)]


# ---------------------------------------------------------------------------
# parsing


def _parse_scalar(text: str, kind: type, path: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{path}: cannot parse {text!r} as {kind.__name__}") from None


def _parse_int_tuple(text: str, path: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{path}: expected comma-separated integers, got {text!r}") from None


_HYPER_FIELDS = {f.name: f for f in dataclasses.fields(HyperParams)}

_SECTION_KEYS = {
    "dataset": {"path"},
    "sbm": {"sizes", "intra", "inter", "feature_dim", "separation", "noise", "seed"},
    "imbalance": {"minority", "im_ratio", "majority_train"},
    "split": {"setting", "val_per_class", "test_per_class"},
    "train": set(_HYPER_FIELDS),
    "run": {"ablation", "repeat", "seeds", "out_dir", "save_checkpoints"},
}


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a config file into an ExperimentConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if not read:
        raise ConfigError(f"config file not found: {path}")

    for section in cp.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    if "imbalance" not in cp or "minority" not in cp["imbalance"]:
        raise ConfigError("imbalance.minority is required")

    hyper_kwargs = {}
    if "train" in cp:
        for key, raw in cp["train"].items():
            f = _HYPER_FIELDS[key]
            if key == "hidden_dims":
                hyper_kwargs[key] = _parse_int_tuple(raw, f"train.{key}")
            elif f.type in ("bool", bool):
                hyper_kwargs[key] = _parse_scalar(raw, bool, f"train.{key}")
            elif f.type in ("int", int):
                hyper_kwargs[key] = _parse_scalar(raw, int, f"train.{key}")
            else:
                hyper_kwargs[key] = _parse_scalar(raw, float, f"train.{key}")
    hyper = HyperParams(**hyper_kwargs)

    imb = cp["imbalance"]
    imbalance = ImbalanceSpec(
        minority_classes=_parse_int_tuple(imb["minority"], "imbalance.minority"),
        im_ratio=_parse_scalar(imb.get("im_ratio", "0.1"), float, "imbalance.im_ratio"),
        majority_train=_parse_scalar(imb.get("majority_train", "20"), int,
                                     "imbalance.majority_train"))

    dataset_dir = cp["dataset"]["path"] if "dataset" in cp and "path" in cp["dataset"] else None
    sbm = None
    if "sbm" in cp:
        s = cp["sbm"]
        if "sizes" not in s or "intra" not in s or "inter" not in s:
            raise ConfigError("sbm needs sizes, intra, and inter")
        sbm = SbmSpec(
            sizes=_parse_int_tuple(s["sizes"], "sbm.sizes"),
            p_intra=_parse_scalar(s["intra"], float, "sbm.intra"),
            p_inter=_parse_scalar(s["inter"], float, "sbm.inter"),
            feature_dim=_parse_scalar(s.get("feature_dim", "8"), int, "sbm.feature_dim"),
            separation=_parse_scalar(s.get("separation", "2.0"), float, "sbm.separation"),
            noise=_parse_scalar(s.get("noise", "1.0"), float, "sbm.noise"),
            seed=_parse_scalar(s.get("seed", "0"), int, "sbm.seed"))

    split = cp["split"] if "split" in cp else {}
    run = cp["run"] if "run" in cp else {}
    seeds = None
    if "seeds" in run:
        seeds = _parse_int_tuple(run["seeds"], "run.seeds")

    return ExperimentConfig(
        imbalance=imbalance, hyper=hyper, dataset_dir=dataset_dir, sbm=sbm,
        setting=split.get("setting", "semi"),
        val_per_class=_parse_scalar(split.get("val_per_class", "10"), int,
                                    "split.val_per_class"),
        test_per_class=_parse_scalar(split.get("test_per_class", "20"), int,
                                     "split.test_per_class"),
        ablation=run.get("ablation", "full"),
        repeat=_parse_scalar(run.get("repeat", "1"), int, "run.repeat"),
        seeds=seeds,
        out_dir=run.get("out_dir", "results"),
        save_checkpoints=_parse_scalar(run.get("save_checkpoints", "false"), bool,
                                       "run.save_checkpoints"))
