"""Run and sweep configuration files (JSON).

A run config looks like::

    {
      "variant": "gdvm", "beta": 0.5, "latent_dim": 64,
      "architecture": {"trunk": [...], "classifier": [...], "mu_activation": null},
      "dataset": {"generator": "blobs", "params": {...}, "test_fraction": 0.3, "seed": 0},
      "optimizer": {"kind": "rmsprop", "lr": 0.001, "rho": 0.9},
      "epochs": 20, "batch_size": 100, "dropout": true, "seeds": [1, 2, 3],
      "split": {"val_fraction": 0.2, "stratified": true},
      "dtype": "float64", "out_dir": "runs/example"
    }

Unknown keys are rejected so typos surface as errors naming the field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .model import VARIANTS, Architecture
from .nn import OptimizerState

GENERATORS = ("blobs", "multilabel", "zeroshot", "idx", "mnist-sample")
DTYPES = ("float64", "float32")
TASK_METRICS = {"multiclass": ("accuracy",), "multilabel": ("micro_f1", "macro_f1"), "zeroshot": ("top1",)}
GENERATOR_TASK = {"blobs": "multiclass", "multilabel": "multilabel", "zeroshot": "zeroshot",
                  "idx": "multiclass", "mnist-sample": "multiclass"}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")


@dataclass
class DatasetBlock:
    """Where samples come from and how the test portion is carved out.

    ``generator`` is a synthetic generator name, ``idx`` (``params`` holds
    ``images``/``labels`` paths) or ``mnist-sample`` (the bundled 5000-image
    sample, converted to IDX under ``params.cache_dir``). ``subsample``
    draws that many training instances per seed after the test carve.
    """

    generator: str
    params: dict = field(default_factory=dict)
    test_fraction: float = 0.0
    subsample: Optional[int] = None
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"dataset.generator: must be one of {GENERATORS}, got {self.generator!r}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"dataset.test_fraction: must be in [0, 1), got {self.test_fraction}")
        if self.subsample is not None and self.subsample < 1:
            raise ConfigError(f"dataset.subsample: must be >= 1, got {self.subsample}")

    @property
    def task_kind(self) -> str:
        return GENERATOR_TASK[self.generator]

    def to_dict(self) -> dict:
        return {"generator": self.generator, "params": dict(self.params), "test_fraction": self.test_fraction,
                "subsample": self.subsample, "stratified": self.stratified, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetBlock":
        _check_keys(d, {"generator", "params", "test_fraction", "subsample", "stratified", "seed"}, "dataset")
        if "generator" not in d:
            raise ConfigError("dataset.generator: missing")
        return cls(**d)


@dataclass
class RunConfig:
    variant: str
    beta: float
    latent_dim: int
    architecture: dict
    dataset: DatasetBlock
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 0.001})
    epochs: int = 10
    batch_size: int = 100
    dropout: bool = True
    seeds: list = field(default_factory=lambda: [0])
    split: dict = field(default_factory=lambda: {"val_fraction": 0.2, "stratified": True})
    dtype: str = "float64"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {VARIANTS}, got {self.variant!r}")
        if not isinstance(self.beta, (int, float)) or self.beta < 0:
            raise ConfigError(f"beta: must be a non-negative number, got {self.beta!r}")
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError(f"latent_dim: must be an integer >= 1, got {self.latent_dim!r}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs: must be an integer >= 0, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size: must be an integer >= 1, got {self.batch_size!r}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError(f"seeds: must be a non-empty list of integers, got {self.seeds!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: must be one of {DTYPES}, got {self.dtype!r}")
        _check_keys(self.split, {"val_fraction", "stratified"}, "split")
        val = self.split.get("val_fraction", 0.2)
        if not 0.0 <= val < 1.0:
            raise ConfigError(f"split.val_fraction: must be in [0, 1), got {val}")
        _check_keys(self.optimizer, {"kind", "lr", "momentum", "rho", "beta1", "beta2", "eps"}, "optimizer")
        try:
            self.optimizer_state()
        except ConfigError as exc:
            raise ConfigError(f"optimizer: {exc}") from None
        _check_keys(self.architecture, {"trunk", "classifier", "mu_activation"}, "architecture")
        try:
            self.arch()
        except ConfigError as exc:
            raise ConfigError(f"architecture: {exc}") from None

    def arch(self) -> Architecture:
        return Architecture.from_dict({**self.architecture, "latent_dim": self.latent_dim})

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(**self.optimizer)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "beta": self.beta,
            "latent_dim": self.latent_dim,
            "architecture": json.loads(json.dumps(self.architecture)),
            "dataset": self.dataset.to_dict(),
            "optimizer": dict(self.optimizer),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "dropout": self.dropout,
            "seeds": list(self.seeds),
            "split": dict(self.split),
            "dtype": self.dtype,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {"variant", "beta", "latent_dim", "architecture", "dataset", "optimizer", "epochs",
                   "batch_size", "dropout", "seeds", "split", "dtype", "out_dir"}
        _check_keys(d, allowed, "config")
        for key in ("variant", "latent_dim", "architecture", "dataset"):
            if key not in d:
                raise ConfigError(f"{key}: missing")
        d = dict(d)
        d.setdefault("beta", 0.0)
        d["dataset"] = DatasetBlock.from_dict(d["dataset"])
        return cls(**d)

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return RunConfig.from_dict(data)


@dataclass
class SweepSpec:
    betas: list
    epochs: list
    metric: str

    def __post_init__(self):
        if not self.betas or any(not isinstance(b, (int, float)) or b < 0 for b in self.betas):
            raise ConfigError(f"betas: must be a non-empty list of non-negative numbers, got {self.betas!r}")
        if not self.epochs or any(not isinstance(e, int) or e < 0 for e in self.epochs):
            raise ConfigError(f"epochs: must be a non-empty list of integers >= 0, got {self.epochs!r}")
        if self.metric not in {m for ms in TASK_METRICS.values() for m in ms}:
            raise ConfigError(f"metric: unknown selection metric {self.metric!r}")

    def check_task(self, task_kind: str) -> None:
        if self.metric not in TASK_METRICS[task_kind]:
            raise ConfigError(f"metric: {self.metric!r} does not apply to a {task_kind} task "
                              f"(use one of {TASK_METRICS[task_kind]})")

    def to_dict(self) -> dict:
        return {"betas": list(self.betas), "epochs": list(self.epochs), "metric": self.metric}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        _check_keys(d, {"betas", "epochs", "metric"}, "sweep")
        for key in ("betas", "epochs", "metric"):
            if key not in d:
                raise ConfigError(f"{key}: missing")
        return cls(**d)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_config(path) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(path))
    base = os.path.dirname(os.path.abspath(path))
    params = cfg.dataset.params
    for key in ("images", "labels", "cache_dir"):
        if isinstance(params.get(key), str) and not os.path.isabs(params[key]):
            params[key] = os.path.normpath(os.path.join(base, params[key]))
    if not os.path.isabs(cfg.out_dir):
        cfg.out_dir = os.path.normpath(os.path.join(base, cfg.out_dir))
    return cfg


def load_sweep(path) -> SweepSpec:
    return SweepSpec.from_dict(_read_json(path))


def dump_json(obj, path) -> None:
    """Atomic write: temp file then rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        if isinstance(obj, str):
            fh.write(obj)
        else:
            json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_config(cfg: RunConfig, path) -> None:
    dump_json(cfg.to_dict(), path)
