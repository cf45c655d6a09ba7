"""Experiment configuration: every knob of a run, JSON round-trippable."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from . import optim

ABLATION_FLAGS = ("acda_image", "pida_image", "acda_region", "pida_region")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    # data: either an on-disk dataset or generation parameters
    data_dir: Optional[str] = None
    shift: float = 1.0
    image_size: int = 32
    num_classes: int = 4
    n_source: int = 200
    n_unlabeled: int = 200
    n_val: int = 50
    k: int = 1
    # jigsaw
    lambda_j: float = 0.1
    N: int = 100
    N_region: int = 24
    n_image: int = 4
    n_region: int = 2
    r: int = 2
    # schedule: sized so one full run fits in two minutes on one core
    max_epoch: int = 12
    epochs_pre: int = 2
    batch_size: int = 8
    target_batch_size: Optional[int] = None
    base_lr: float = 0.03
    # jigsaw classifiers see gradients scaled by lambda_j; this restores their pace
    jig_lr_mult: float = 10.0
    momentum: float = optim.REFERENCE_MOMENTUM
    weight_decay: float = optim.REFERENCE_WEIGHT_DECAY
    lr_power: float = optim.REFERENCE_LR_POWER
    seed: int = 0
    # ablation
    acda_image: bool = True
    pida_image: bool = True
    acda_region: bool = True
    pida_region: bool = True
    # bookkeeping
    out_dir: Optional[str] = None
    eval_every: int = 1
    dump_masks: bool = False

    # --- derived ------------------------------------------------------------
    @property
    def image_level(self) -> bool:
        return self.acda_image or self.pida_image

    @property
    def region_level(self) -> bool:
        return self.acda_region or self.pida_region

    @property
    def any_alignment(self) -> bool:
        return self.image_level or self.region_level

    @property
    def tgt_batch(self) -> int:
        return self.target_batch_size or min(self.batch_size, self.k)

    def with_flags(self, **flags) -> "ExperimentConfig":
        return replace(self, **flags)

    def validate(self) -> "ExperimentConfig":
        def need(ok, field, msg):
            if not ok:
                raise ConfigError(field, msg)

        need(self.lambda_j >= 0, "lambda_j", "must be >= 0")
        need(self.N >= 1, "N", "must be >= 1")
        need(self.N_region >= 1, "N_region", "must be >= 1")
        need(self.k >= 1, "k", "must be >= 1")
        need(self.max_epoch >= 0, "max_epoch", "must be >= 0")
        need(0 <= self.epochs_pre, "epochs_pre", "must be >= 0")
        need(self.max_epoch >= self.epochs_pre or self.max_epoch == 0, "epochs_pre",
             f"must not exceed max_epoch={self.max_epoch}")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.target_batch_size is None or self.target_batch_size >= 1, "target_batch_size", "must be >= 1")
        need(self.base_lr >= 0, "base_lr", "must be >= 0")
        need(0 <= self.momentum < 1, "momentum", "must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.n_image >= 1 and self.n_region >= 1 and self.r >= 1, "n_image", "grid sizes must be >= 1")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.image_size % self.n_image == 0, "n_image",
             f"image size {self.image_size} not divisible by n_image={self.n_image}")
        need(self.image_size % (self.r * self.n_region) == 0, "r",
             f"image size {self.image_size} not divisible by r*n_region={self.r * self.n_region}")
        need(self.n_source >= 1 and self.n_unlabeled >= 1, "n_source", "datasets must be non-empty")
        return self

    # --- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        for name, value in doc.items():
            default = getattr(cls, name, None)
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(name, f"expected true/false, got {value!r}")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(name, f"expected a number, got {value!r}")
                if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
                    if not value.is_integer():
                        raise ConfigError(name, f"expected an integer, got {value!r}")
                    doc = {**doc, name: int(value)}
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(doc)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def s_plus_t(config: ExperimentConfig) -> ExperimentConfig:
    """Same run with every alignment switched off."""
    return replace(config, **{f: False for f in ABLATION_FLAGS})


def acda_image_only(config: ExperimentConfig) -> ExperimentConfig:
    return replace(config, acda_image=True, pida_image=False, acda_region=False, pida_region=False)


# Grids used by the sweep presets.
LAMBDA_GRID = (0.025, 0.05, 0.1, 0.2, 0.4)
N_GRID = (30, 50, 100, 300, 500)
K_GRID = (1, 3, 5, 10, 20)
