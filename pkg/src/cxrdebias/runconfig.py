"""Run configuration: a TOML config file with CLI-flag overrides, snapshot
written into every output directory so any figure can be reproduced from
its run directory alone. All randomness flows from the single root seed
recorded here.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import toml

from . import classifier as cls
from .ablation import EXPERIMENT_TABLE
from .lungseg import MaskRepairParams

_SECTIONS = {
    "paths": ("data_root", "out_dir"),
    "run": ("experiment", "seed", "k_folds", "rounds"),
    "schedule": (
        "input_size",
        "batch_size",
        "phase1_lr",
        "phase1_epochs",
        "phase2_lr",
        "phase2_epochs",
    ),
    "pipeline": ("closing_kernel", "min_hole_area_fraction", "qc_secondary_ratio"),
    "classifier": (
        "backbone",
        "head_pooling",
        "head_hidden",
        "head_dropout",
        "freeze_phase1",
        "freeze_phase2",
        "pretrained",
    ),
}


@dataclass
class RunConfig:
    data_root: str = "."
    out_dir: str = "runs"
    experiment: str = "F"
    seed: int = 0
    k_folds: int = 4
    rounds: str = "to_balance"
    input_size: int = 224
    batch_size: int = 32
    phase1_lr: float = 5e-4
    phase1_epochs: int = 50
    phase2_lr: float = 1e-5
    phase2_epochs: int = 10
    closing_kernel: int = 8
    min_hole_area_fraction: float = 1.0 / 16.0
    qc_secondary_ratio: float = 0.25
    backbone: str = "vgg16"
    head_pooling: str = "avg"
    head_hidden: int = 256
    head_dropout: float = 0.5
    freeze_phase1: str = "head_only"
    freeze_phase2: str = "last_stage"
    pretrained: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENT_TABLE:
            raise ValueError(f"experiment must be one of A..F, got {self.experiment!r}")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if str(self.rounds) != "to_balance":
            if int(self.rounds) < 0:
                raise ValueError("rounds must be 'to_balance' or a non-negative integer")
        if self.closing_kernel < 1:
            raise ValueError("closing_kernel must be >= 1")
        if not 0.0 < self.min_hole_area_fraction < 1.0:
            raise ValueError("min_hole_area_fraction must be in (0, 1)")
        if not 0.0 < self.qc_secondary_ratio < 1.0:
            raise ValueError("qc_secondary_ratio must be in (0, 1)")
        # delegate the remaining range checks to the dataclasses they feed
        self.schedule()
        self.classifier_config()
        self.repair_params()

    def schedule(self) -> cls.TrainSchedule:
        return cls.TrainSchedule(
            phase1=cls.PhaseSpec(self.phase1_lr, self.phase1_epochs),
            phase2=cls.PhaseSpec(self.phase2_lr, self.phase2_epochs),
            batch_size=self.batch_size,
            input_size=self.input_size,
            seed=self.seed,
        )

    def classifier_config(self) -> cls.ClassifierConfig:
        return cls.ClassifierConfig(
            backbone=self.backbone,
            head=cls.HeadSpec(
                pooling=self.head_pooling,
                hidden=self.head_hidden,
                dropout=self.head_dropout,
            ),
            freeze=cls.FreezePolicy(phase1=self.freeze_phase1, phase2=self.freeze_phase2),
            pretrained=self.pretrained,
        )

    def repair_params(self) -> MaskRepairParams:
        return MaskRepairParams(
            closing_kernel=self.closing_kernel,
            min_hole_area_fraction=self.min_hole_area_fraction,
        )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML config (missing file fields fall back to defaults), then
    apply non-None overrides (CLI flags win over file values)."""
    values: dict = {}
    if path is not None:
        raw = toml.loads(Path(path).read_text())
        known = {f.name for f in fields(RunConfig)}
        for section, content in raw.items():
            if not isinstance(content, dict):
                raise ValueError(f"config {path}: top-level entries must be sections")
            for key, value in content.items():
                if key not in known:
                    raise ValueError(f"config {path}: unknown key {section}.{key}")
                values[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(**values)


def snapshot_config(cfg: RunConfig, path) -> None:
    """Write the effective config as TOML next to the run outputs."""
    flat = asdict(cfg)
    doc = {section: {k: flat[k] for k in keys} for section, keys in _SECTIONS.items()}
    Path(path).write_text(toml.dumps(doc))
