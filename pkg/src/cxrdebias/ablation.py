"""Ablation experiments: the six (segmentation, cropping, rib-suppression)
flag combinations, preprocessing pipeline composition, master-model
training on the pruned balanced corpus, and external generalization
testing.

Pipeline order is fixed and identical for training and external testing:
equalize (always) -> rib suppression (if flagged) -> lung masking (if
flagged; the mask is predicted from the equalized, pre-suppression image,
then repaired and quality-checked) -> close crop (if flagged) -> letterbox
to the classifier input size (always terminal). Images failing mask QC are
flagged excluded. Gold-standard masks, when supplied, are used as-is
without repair or QC.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifier as cls
from .errors import ConfigurationError, EmptyContentError, EvaluationError
from .imgops import apply_mask, close_crop, equalize_histogram, letterbox
from .ingest import DatasetManifest, load_image
from .lungseg import (
    DEFAULT_QC_SECONDARY_RATIO,
    MaskRepairParams,
    SegModel,
    predict_mask,
    qc_mask,
    repair_mask,
)
from .rasters import GrayImage, LungMask
from .ribsup import SuppModel, suppress_bones

EXPERIMENT_TABLE = {
    "A": (False, False, False),
    "B": (False, False, True),
    "C": (True, False, False),
    "D": (True, False, True),
    "E": (True, True, False),
    "F": (True, True, True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    label: str
    segmentation: bool
    cropping: bool
    rib_suppression: bool

    def __post_init__(self):
        if self.cropping and not self.segmentation:
            raise ValueError("cropping is only applied in combination with segmentation")
        expected = EXPERIMENT_TABLE.get(self.label)
        if expected is None:
            raise ValueError(f"experiment label must be A..F, got {self.label!r}")
        if expected != (self.segmentation, self.cropping, self.rib_suppression):
            raise ValueError(
                f"experiment {self.label} must have (segmentation, cropping, "
                f"rib_suppression) = {expected}"
            )


def experiment_config(label: str) -> ExperimentConfig:
    seg, crop, rib = EXPERIMENT_TABLE[label]
    return ExperimentConfig(label, seg, crop, rib)


def make_experiment_configs() -> list[ExperimentConfig]:
    return [experiment_config(label) for label in "ABCDEF"]


@dataclass
class PipelineModels:
    seg: SegModel | None = None
    supp: SuppModel | None = None


@dataclass(frozen=True)
class PipelineOutput:
    image: GrayImage | None
    excluded: bool
    reason: str = ""


def compose_pipeline(
    cfg: ExperimentConfig,
    models: PipelineModels,
    input_size: int = 224,
    repair_params: MaskRepairParams = MaskRepairParams(),
    qc_secondary_ratio: float = DEFAULT_QC_SECONDARY_RATIO,
):
    """Build the per-image preprocessing function for an experiment.

    The returned callable takes a GrayImage (and optionally a gold-standard
    mask) and yields a PipelineOutput whose image, when not excluded, is
    always input_size x input_size.
    """
    if cfg.segmentation and models.seg is None:
        raise ConfigurationError(f"experiment {cfg.label} requires a segmentation model")
    if cfg.rib_suppression and models.supp is None:
        raise ConfigurationError(f"experiment {cfg.label} requires a rib-suppression model")

    def run(img: GrayImage, gold_mask: LungMask | None = None) -> PipelineOutput:
        equalized = equalize_histogram(img)
        work = equalized
        if cfg.rib_suppression:
            work = suppress_bones(models.supp, work)
        if cfg.segmentation:
            if gold_mask is not None:
                mask = gold_mask
            else:
                mask = repair_mask(predict_mask(models.seg, equalized), repair_params)
                qc = qc_mask(mask, qc_secondary_ratio)
                if not qc.accepted:
                    return PipelineOutput(None, True, qc.reason)
            work = apply_mask(work, mask)
        if cfg.cropping:
            try:
                work, _ = close_crop(work)
            except EmptyContentError:
                # masking left no foreground at all; exclude rather than abort
                return PipelineOutput(None, True, "empty_after_masking")
        return PipelineOutput(letterbox(work, input_size), False, "")

    return run


def preprocess_records(records, pipeline, image_loader=None, mask_lookup=None):
    """Run the pipeline over records; returns (items, excluded) where items
    is a list of (record, image) for the survivors and excluded a list of
    (record, reason)."""
    loader = image_loader or load_image
    items, excluded = [], []
    for record in records:
        gold = mask_lookup(record) if mask_lookup else None
        out = pipeline(loader(record), gold_mask=gold)
        if out.excluded:
            excluded.append((record, out.reason))
        else:
            items.append((record, out.image))
    return items, excluded


def train_master(
    manifest: DatasetManifest,
    prune_list,
    cfg: ExperimentConfig,
    sched: cls.TrainSchedule,
    models: PipelineModels,
    classifier_cfg: cls.ClassifierConfig | None = None,
    holdout_fraction: float = 0.15,
    image_loader=None,
    mask_lookup=None,
) -> cls.ClsModel:
    """Train one model on the pruned, class-balanced corpus. A stratified,
    seeded holdout is carved out purely for checkpoint selection."""
    pruned = set(prune_list)
    remaining = [r for r in manifest.records if r.id not in pruned]
    n_nod = sum(1 for r in remaining if r.label == "nodule")
    n_non = len(remaining) - n_nod
    if n_nod != n_non:
        raise ValueError(
            f"master training requires a balanced corpus, got {n_nod} nodule "
            f"vs {n_non} non-nodule after pruning"
        )
    pipeline = compose_pipeline(cfg, models, input_size=sched.input_size)
    items, _excluded = preprocess_records(
        remaining, pipeline, image_loader=image_loader, mask_lookup=mask_lookup
    )
    rng = np.random.Generator(np.random.Philox(sched.seed))
    train_items, val_items = [], []
    for label in ("nodule", "non_nodule"):
        group = [(rec, img) for rec, img in items if rec.label == label]
        order = rng.permutation(len(group))
        n_val = max(1, int(round(len(group) * holdout_fraction)))
        for pos, idx in enumerate(order):
            rec, img = group[idx]
            target = val_items if pos < n_val else train_items
            target.append((img, 1 if rec.label == "nodule" else 0))
    model = cls.build_classifier(classifier_cfg or cls.ClassifierConfig(), seed=sched.seed)
    model, _history = cls.train_fold(model, train_items, val_items, sched)
    return model


@dataclass
class ExternalTestResult:
    per_image: list  # (id, probability)
    excluded: list  # (id, reason)
    accuracy: float
    labels: dict = field(default_factory=dict)  # id -> label, for reporting


def external_test(
    model: cls.ClsModel,
    external: DatasetManifest,
    pipeline,
    image_loader=None,
    mask_lookup=None,
) -> ExternalTestResult:
    """Preprocess every external image with the same pipeline, exclude and
    report mask-QC failures, and score the rest.

    Accuracy is the fraction of included images classified correctly at the
    0.5 threshold; for an all-nodule external set this reduces to the
    fraction of probabilities above 0.5.
    """
    items, excluded_pairs = preprocess_records(
        external.records, pipeline, image_loader=image_loader, mask_lookup=mask_lookup
    )
    if not items:
        raise EvaluationError("every external image was excluded; nothing to evaluate")
    probs = cls.predict_batch(model, [img for _, img in items])
    per_image = [(rec.id, float(p)) for (rec, _), p in zip(items, probs)]
    correct = [
        (p > 0.5) == (rec.label == "nodule") for (rec, _), p in zip(items, probs)
    ]
    return ExternalTestResult(
        per_image=per_image,
        excluded=[(rec.id, reason) for rec, reason in excluded_pairs],
        accuracy=float(np.mean(correct)),
        labels={r.id: r.label for r in external.records},
    )


def save_external_result(
    result: ExternalTestResult, csv_path, json_path=None, config: dict | None = None
) -> None:
    """CSV of (id, probability, included, exclusion_reason) plus a JSON
    summary with accuracy, counts and the config snapshot."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "probability", "included", "exclusion_reason"])
        for rec_id, prob in result.per_image:
            writer.writerow([rec_id, f"{prob:.6f}", 1, ""])
        for rec_id, reason in result.excluded:
            writer.writerow([rec_id, "", 0, reason])
    if json_path is not None:
        summary = {
            "accuracy": result.accuracy,
            "included": len(result.per_image),
            "excluded": len(result.excluded),
            "config": config or {},
        }
        Path(json_path).write_text(json.dumps(summary, indent=2))
