"""YAML experiment configs.

A config is one YAML document; every section is checked before any work
starts. Minimal example::

    experiment: moons45
    out: runs
    seeds: [0, 1]
    data:
      generator: two_moons
      n: 500
      noise: 0.1
      seed: 1000
      shift: {kind: rotation, angle: 45}
    train:
      variant: cd3a
      lambda_max: 3.0
      disc_lr_mult: 10.0
    eval:
      metrics: [accuracy, proxy_a]
      period: 10
    sweep:
      k_values: [1, 2, 4, 8, 16]
      methods: [source_only, grl, cd3a]
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from dropda import data as D
from dropda.adapt import VARIANTS, TrainConfig
from dropda.diffcore import make_rng
from dropda.errors import ValidationError

METRICS = ("accuracy", "proxy_a", "proxy_a_raw")
GENERATORS = ("two_moons", "blobs")


@dataclass
class DataSpec:
    generator: str = "two_moons"
    n: int = 500
    noise: float = 0.1
    n_classes: int = 3
    means: list | None = None
    std: float = 0.5
    seed: int = 1000
    shift: D.ShiftSpec = field(default_factory=lambda: D.ShiftSpec("rotation", 45.0))
    dir: str | None = None  # default: <out>/<experiment>/data

    def validate(self):
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}; choose from {', '.join(GENERATORS)}")
        if self.n < 2:
            raise ValidationError("data.n must be >= 2")
        if self.noise < 0 or self.std < 0:
            raise ValidationError("data.noise and data.std must be non-negative")
        if self.generator == "blobs":
            if self.n_classes < 2:
                raise ValidationError("blobs need n_classes >= 2")
            if self.means is not None and len(self.means) != self.n_classes:
                raise ValidationError("blobs need one mean per class in data.means")
        if self.shift.kind == "rotation":
            if not -180.0 < self.shift.angle <= 180.0:
                raise ValidationError("rotation angle must be in (-180, 180]")
            if self.generator == "blobs" and self.means is not None and len(self.means[0]) != 2:
                raise ValidationError("rotation needs 2-D data")

    def generate(self):
        """Return ``(source, target_eval)``; the target is the shifted source sample."""
        rng = make_rng(self.seed)
        if self.generator == "two_moons":
            src = D.make_two_moons(self.n, self.noise, rng)
        else:
            means = self.means if self.means is not None else blob_means(self.n_classes)
            src = D.make_blobs(self.n, self.n_classes, means, self.std, rng)
        return src, D.apply_shift(src, self.shift)


@dataclass
class EvalSpec:
    metrics: list = field(default_factory=lambda: ["accuracy"])
    period: int = 1

    def validate(self):
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ValidationError(f"unknown metrics {bad}; valid metrics: {', '.join(METRICS)}")
        if self.period < 0:
            raise ValidationError("eval.period must be >= 0")


@dataclass
class SweepSpec:
    k_values: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    methods: list = field(default_factory=lambda: ["source_only", "grl", "cd3a"])
    alpha: float = 0.05

    def validate(self):
        if not self.k_values or any(int(k) < 1 for k in self.k_values):
            raise ValidationError("sweep.k_values must be a non-empty list of positive ints")
        bad = [m for m in self.methods if m not in VARIANTS]
        if bad:
            raise ValidationError(f"unknown sweep methods {bad}")
        if len(self.methods) < 2:
            raise ValidationError("sweep.methods needs at least 2 methods to rank")
        if self.alpha not in (0.05, 0.10):
            raise ValidationError("sweep.alpha must be 0.05 or 0.10")


@dataclass
class ExperimentConfig:
    experiment: str = "experiment"
    out: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self):
        if not self.seeds:
            raise ValidationError("seed list must be non-empty")
        if not self.experiment or "/" in self.experiment:
            raise ValidationError(f"bad experiment name {self.experiment!r}")
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        self.sweep.validate()

    @property
    def experiment_dir(self) -> Path:
        return Path(self.out) / self.experiment

    @property
    def data_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir else self.experiment_dir / "data"

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed, eval_period=self.eval.period)

    def to_dict(self) -> dict:
        d = {"experiment": self.experiment, "out": self.out, "seeds": list(self.seeds)}
        data = asdict(self.data)
        data["shift"] = {"kind": self.data.shift.kind, "angle": self.data.shift.angle,
                         "offset": list(self.data.shift.offset)}
        d["data"] = data
        d["train"] = self.train.to_dict()
        d["eval"] = asdict(self.eval)
        d["sweep"] = asdict(self.sweep)
        return d


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValidationError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ValidationError(f"section {name!r}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping at top level")
    top = {"experiment", "out", "seeds", "data", "train", "eval", "sweep"}
    unknown = set(raw) - top
    if unknown:
        raise ValidationError(f"unknown top-level keys: {sorted(unknown)}")
    data_raw = dict(raw.get("data") or {})
    shift = data_raw.pop("shift", None)
    data = _section(DataSpec, data_raw, "data")
    if shift is not None:
        s = _section(D.ShiftSpec, shift, "data.shift")
        data = replace(data, shift=replace(s, angle=float(s.angle), offset=tuple(s.offset)))
    train = TrainConfig.from_dict(raw.get("train") or {})
    cfg = ExperimentConfig(
        experiment=str(raw.get("experiment", "experiment")),
        out=str(raw.get("out", "runs")),
        seeds=[int(s) for s in raw.get("seeds", [0])],
        data=data,
        train=train,
        eval=_section(EvalSpec, raw.get("eval"), "eval"),
        sweep=_section(SweepSpec, raw.get("sweep"), "sweep"),
    )
    return cfg


def load_config(path=None, seed=None, out=None, variant=None) -> ExperimentConfig:
    """Read, apply flag overrides, validate."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML: {exc}") from None
    cfg = from_dict(raw)
    if seed is not None:
        cfg.seeds = [seed]
    if out is not None:
        cfg.out = out
    if variant is not None:
        cfg.train = replace(cfg.train, variant=variant)
    cfg.validate()
    return cfg


def blob_means(n_classes: int, radius: float = 2.0) -> list:
    """Class means evenly spaced on a circle; handy default for blob configs."""
    a = 2 * np.pi * np.arange(n_classes) / n_classes
    return np.column_stack([radius * np.cos(a), radius * np.sin(a)]).tolist()
