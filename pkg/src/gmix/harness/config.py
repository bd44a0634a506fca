"""Experiment configuration: an INI file with sectioned keys, overridable per key.

Sections and keys (defaults in brackets)::

    [dataset]            one dataset; use [dataset:NAME] sections for several
    kind                 two_moons | digits_idx | idx | csv   [two_moons]
    name                 label used in result tables          [kind]
    n, noise, test_n     two-moons sizes and noise            [2000, 0.25, 2000]
    seed                 data-generation seed                 [0]
    n_train, n_test      digits_idx sizes                     [2000, 1000]
    data_dir             where digits_idx writes its files    [<output.dir>/data]
    train_images, train_labels, test_images, test_labels      (idx)
    train_csv, test_csv, label_column                         (csv)
    num_classes          override the inferred class count
    standardize          auto | true | false                  [auto]

    [model]  hidden_dims [64,64]
    [train]  method epochs batch_size eta0 alpha mixup rho gamma seed momentum
             weight_decay grad_floor probe_pairs probe_radius
    [sweep]  methods rho gamma batch_size seeds   comma lists; empty = the [train] value
    [output] dir [runs]  checkpoints [true]

``standardize = auto`` means off for synthetic data and on for image data.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..augment import MixupConfig
from ..data import gen_two_moons, load_csv, load_idx, make_digits_idx, standardize
from ..errors import ConfigError
from ..rng import derive_seed
from ..sharpness import SamConfig
from ..trainers import METHODS, TrainConfig

DATASET_KINDS = ("two_moons", "digits_idx", "idx", "csv")

DEFAULTS = {
    "dataset": {
        "kind": "two_moons", "name": "", "n": "2000", "noise": "0.25", "test_n": "2000",
        "seed": "0", "n_train": "2000", "n_test": "1000", "data_dir": "",
        "train_images": "", "train_labels": "", "test_images": "", "test_labels": "",
        "train_csv": "", "test_csv": "", "label_column": "label", "num_classes": "",
        "standardize": "auto",
    },
    "model": {"hidden_dims": "64,64"},
    "train": {
        "method": "gmix", "epochs": "200", "batch_size": "128", "eta0": "0.1",
        "alpha": "1.0", "mixup": "true", "rho": "0.5", "gamma": "0.5", "seed": "0",
        "momentum": "0.0", "weight_decay": "0.0", "grad_floor": "1e-12",
        "probe_pairs": "0", "probe_radius": "0.05",
    },
    "sweep": {"methods": "", "rho": "", "gamma": "", "batch_size": "", "seeds": ""},
    "output": {"dir": "runs", "checkpoints": "true"},
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "two_moons"
    name: str = "two_moons"
    options: dict = field(default_factory=dict)
    standardize: str = "auto"

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.standardize not in ("auto", "true", "false"):
            raise ConfigError("standardize must be auto, true or false")

    @property
    def standardized(self) -> bool:
        if self.standardize == "auto":
            return self.kind in ("digits_idx", "idx")
        return self.standardize == "true"

    def get(self, key: str):
        return self.options.get(key, DEFAULTS["dataset"][key])


@dataclass(frozen=True)
class SweepAxes:
    methods: tuple
    rho: tuple
    gamma: tuple
    batch_size: tuple
    seeds: tuple

    def __post_init__(self):
        for name in ("methods", "rho", "gamma", "batch_size", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep axis {name!r} is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"sweep seeds must be distinct, got {list(self.seeds)}")

    @property
    def size(self) -> int:
        return len(self.methods) * len(self.rho) * len(self.gamma) * len(self.batch_size) * len(self.seeds)


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    hidden_dims: tuple
    train: TrainConfig
    sweep: SweepAxes
    output_dir: Path
    checkpoints: bool = True

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"dataset names must be distinct, got {names}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in _items(text))


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in _items(text))


def _items(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _bool(text: str, key: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def read_parser(path=None, text: str | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        with open(path) as f:
            cp.read_file(f, source=str(path))
    if text is not None:
        cp.read_string(text)
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides: dict) -> None:
    """Set ``section.key = value`` pairs; dataset keys apply to every dataset section."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        targets = [s for s in cp.sections() if s == section or s.startswith(section + ":")]
        if not targets:
            cp.add_section(section)
            targets = [section]
        for s in targets:
            cp.set(s, key, str(value))


def _section(cp, name: str) -> dict:
    out = dict(DEFAULTS[name.partition(":")[0]])
    if cp.has_section(name):
        for k, v in cp.items(name):
            if k not in out:
                raise ConfigError(f"unknown key {k!r} in section [{name}]")
            out[k] = v
    return out


def _train_config(t: dict) -> TrainConfig:
    try:
        return TrainConfig(
            method=t["method"].strip(),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            eta0=float(t["eta0"]),
            mixup=MixupConfig(alpha=float(t["alpha"]), enabled=_bool(t["mixup"], "train.mixup")),
            sam=SamConfig(rho=float(t["rho"]), grad_floor=float(t["grad_floor"])),
            gamma=float(t["gamma"]),
            seed=int(t["seed"]),
            momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            probe_pairs=int(t["probe_pairs"]),
            probe_radius=float(t["probe_radius"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad [train] value: {exc}") from None


def from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    known = set(DEFAULTS)
    for s in cp.sections():
        if s.partition(":")[0] not in known:
            raise ConfigError(f"unknown section [{s}]")
    ds_sections = [s for s in cp.sections() if s == "dataset" or s.startswith("dataset:")]
    if not ds_sections:
        ds_sections = ["dataset"]
    datasets = []
    for s in ds_sections:
        d = _section(cp, s)
        kind = d["kind"].strip()
        default_name = s.partition(":")[2] or kind
        datasets.append(DatasetSpec(
            kind=kind, name=d["name"].strip() or default_name,
            options={k: v for k, v in d.items() if k not in ("kind", "name", "standardize")},
            standardize=d["standardize"].strip().lower(),
        ))
    model = _section(cp, "model")
    hidden = _ints(model["hidden_dims"])
    train = _train_config(_section(cp, "train"))
    train = replace(train, hidden_dims=hidden)
    sw = _section(cp, "sweep")
    try:
        sweep = SweepAxes(
            methods=tuple(_items(sw["methods"])) or (train.method,),
            rho=_floats(sw["rho"]) or (train.sam.rho,),
            gamma=_floats(sw["gamma"]) or (train.gamma,),
            batch_size=_ints(sw["batch_size"]) or (train.batch_size,),
            seeds=_ints(sw["seeds"]) or (train.seed,),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad [sweep] value: {exc}") from None
    out = _section(cp, "output")
    return ExperimentConfig(
        datasets=tuple(datasets), hidden_dims=hidden, train=train, sweep=sweep,
        output_dir=Path(out["dir"]), checkpoints=_bool(out["checkpoints"], "output.checkpoints"),
    )


def load_config(path=None, overrides: dict | None = None, text: str | None = None) -> ExperimentConfig:
    cp = read_parser(path, text)
    apply_overrides(cp, overrides or {})
    return from_parser(cp)


def build_datasets(spec: DatasetSpec, output_dir=None) -> tuple:
    """``(train, test)`` datasets for ``spec``; standardized when its ``standardize`` option is on."""
    g = spec.get
    m = int(g("num_classes")) if g("num_classes") else None
    if spec.kind == "two_moons":
        seed = int(g("seed"))
        train = gen_two_moons(int(g("n")), float(g("noise")), derive_seed(seed, "moons-train"))
        test = gen_two_moons(int(g("test_n")), float(g("noise")), derive_seed(seed, "moons-test"), "test")
    elif spec.kind == "digits_idx":
        root = Path(g("data_dir")) if g("data_dir") else Path(output_dir or ".") / "data"
        paths = make_digits_idx(root / spec.name, int(g("n_train")), int(g("n_test")), int(g("seed")))
        train = load_idx(*paths["train"], num_classes=m or 10)
        test = load_idx(*paths["test"], num_classes=m or 10, split="test")
    elif spec.kind == "idx":
        need = ("train_images", "train_labels", "test_images", "test_labels")
        missing = [k for k in need if not g(k)]
        if missing:
            raise ConfigError(f"idx dataset {spec.name!r} is missing {missing}")
        train = load_idx(g("train_images"), g("train_labels"), num_classes=m)
        test = load_idx(g("test_images"), g("test_labels"), num_classes=m or train.num_classes,
                        split="test")
    else:
        if not g("train_csv") or not g("test_csv"):
            raise ConfigError(f"csv dataset {spec.name!r} needs train_csv and test_csv")
        train = load_csv(g("train_csv"), g("label_column"), num_classes=m)
        test = load_csv(g("test_csv"), g("label_column"), num_classes=m or train.num_classes,
                        split="test")
    if train.num_classes != test.num_classes:
        m = max(train.num_classes, test.num_classes)
        train, test = replace(train, num_classes=m), replace(test, num_classes=m)
    if spec.standardized:
        train, test = standardize(train, test)
    return train, test
