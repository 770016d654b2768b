"""Evolutionary pruning of hard nodule images.

Each round trains one classifier per fold (fold i validates on shard i,
trains on the rest, prune-listed ids excluded everywhere), computes the
per-fold validation AUC, scores every remaining nodule image with all fold
models, and counts a misclassification whenever a model scores a nodule
image at or below 0.5. The image with the highest count (ties: lowest mean
score, then lexicographically smallest id) is appended to the prune list
before the next round. Models are retrained from scratch each round and the
fold assignment is fixed across rounds so AUC trajectories stay comparable.

The training engine is injectable: tests drive the loop with frozen mock
predictors, the CLI wires in the real classifier trainer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .ingest import DatasetManifest, FoldAssignment, ImageRecord

MISCLASS_THRESHOLD = 0.5


def auc(scores) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted one half (pairwise / rank-sum definition).

    ``scores`` is a sequence of (score, label) with labels in {0, 1}.
    """
    values = np.asarray([s for s, _ in scores], dtype=np.float64)
    labels = np.asarray([int(l) for _, l in scores])
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc requires both labels present")
    ranks = rankdata(values)  # midranks for ties
    u = float(ranks[labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def stable_threshold(auc_series, target: float) -> int | None:
    """Smallest index k such that every value from k on is >= target."""
    series = list(auc_series)
    if not series:
        raise ValueError("auc series must be non-empty")
    idx = len(series)
    for i in range(len(series) - 1, -1, -1):
        if series[i] >= target:
            idx = i
        else:
            break
    return idx if idx < len(series) else None


def select_prune_candidate(counts: dict[str, int], mean_scores: dict[str, float]) -> str:
    """Argmax misclassification count; ties broken by lowest mean score,
    remaining ties by lexicographically smallest id."""
    if not counts:
        raise ValueError("empty misclassification table")
    return min(counts, key=lambda rec_id: (-counts[rec_id], mean_scores[rec_id], rec_id))


@dataclass(frozen=True)
class RoundMetrics:
    round_index: int
    pruned_id: str | None  # None for the round-0 report
    fold_aucs: tuple[float, ...]
    auc_mean: float
    auc_std: float
    misclass_counts: dict[str, int]
    mean_scores: dict[str, float]

    @classmethod
    def build(cls, round_index, pruned_id, fold_aucs, misclass_counts, mean_scores):
        arr = np.asarray(fold_aucs, dtype=np.float64)
        return cls(
            round_index=round_index,
            pruned_id=pruned_id,
            fold_aucs=tuple(float(a) for a in fold_aucs),
            auc_mean=float(arr.mean()),
            auc_std=float(arr.std()),
            misclass_counts=dict(misclass_counts),
            mean_scores=dict(mean_scores),
        )


@dataclass
class PruneLog:
    rounds: list[RoundMetrics] = field(default_factory=list)
    prune_list: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self, manifest: DatasetManifest | None = None) -> None:
        if len(set(self.prune_list)) != len(self.prune_list):
            raise ValueError("prune list contains duplicates")
        if self.rounds and len(self.prune_list) != len(self.rounds) - 1:
            raise ValueError("prune list length must equal rounds completed")
        if manifest is not None:
            nodule_ids = {r.id for r in manifest.records if r.label == "nodule"}
            stray = set(self.prune_list) - nodule_ids
            if stray:
                raise ValueError(f"pruned non-nodule or unknown ids: {sorted(stray)}")

    def auc_mean_series(self) -> list[float]:
        return [r.auc_mean for r in self.rounds]


def _check_fold_cover(remaining, folds: FoldAssignment) -> None:
    missing = [r.id for r in remaining if r.id not in folds.assignment]
    if missing:
        raise ValueError(f"records missing from fold assignment: {missing[:5]}")


def run_prune_round(
    manifest: DatasetManifest,
    folds: FoldAssignment,
    prune_list,
    pipeline,
    sched,
    trainer=None,
    round_index: int = 0,
) -> RoundMetrics:
    """Train one model per fold (prune-listed ids excluded everywhere),
    compute per-fold validation AUC, and score every remaining nodule image
    with all fold models.

    ``trainer(train_records, val_records, sched, fold_index, round_index)``
    must return a scorer mapping a list of records to an array of nodule
    probabilities. When None, the real classifier trainer is built from
    ``pipeline`` and ``sched``.
    """
    pruned = set(prune_list)
    nodule_ids = {r.id for r in manifest.records if r.label == "nodule"}
    stray = pruned - nodule_ids
    if stray:
        raise ValueError(f"prune list contains non-nodule ids: {sorted(stray)}")
    remaining = [r for r in manifest.records if r.id not in pruned]
    n_nod = sum(1 for r in remaining if r.label == "nodule")
    n_non = len(remaining) - n_nod
    if n_nod < n_non:
        raise ValueError(
            f"remaining nodule count {n_nod} fell below non-nodule count {n_non}"
        )
    _check_fold_cover(remaining, folds)
    if trainer is None:
        trainer = make_classifier_trainer(pipeline)

    remaining_nodules = [r for r in remaining if r.label == "nodule"]
    fold_aucs = []
    score_table = np.zeros((folds.k, len(remaining_nodules)))
    for fold_index in range(folds.k):
        val = [r for r in remaining if folds.assignment[r.id] == fold_index]
        train = [r for r in remaining if folds.assignment[r.id] != fold_index]
        scorer = trainer(train, val, sched, fold_index, round_index)
        val_scores = scorer(val)
        fold_aucs.append(
            auc(list(zip(val_scores, [1 if r.label == "nodule" else 0 for r in val])))
        )
        score_table[fold_index] = scorer(remaining_nodules)

    counts = {
        r.id: int((score_table[:, j] <= MISCLASS_THRESHOLD).sum())
        for j, r in enumerate(remaining_nodules)
    }
    means = {r.id: float(score_table[:, j].mean()) for j, r in enumerate(remaining_nodules)}
    return RoundMetrics.build(round_index, None, fold_aucs, counts, means)


def evolutionary_prune(
    manifest: DatasetManifest,
    folds: FoldAssignment,
    pipeline,
    sched,
    rounds="to_balance",
    trainer=None,
    config: dict | None = None,
) -> PruneLog:
    """Run the full pruning loop. ``rounds`` is an integer or "to_balance"
    (prune until class counts are equal). The log gains one RoundMetrics per
    training round including the initial un-pruned round, so ``rounds=R``
    yields R+1 entries and R pruned ids."""
    n_nod, n_non = manifest.class_counts
    diff = n_nod - n_non
    if rounds == "to_balance":
        n_rounds = diff
    else:
        n_rounds = int(rounds)
    if n_rounds < 0 or n_rounds > diff:
        raise ValueError(
            f"rounds={rounds} out of range: can prune at most {diff} nodule images "
            "before the classes become unbalanced the other way"
        )
    if trainer is None:
        trainer = make_classifier_trainer(pipeline)

    log = PruneLog(config=dict(config or {}), seed=getattr(sched, "seed", 0))
    prune_list: list[str] = []
    metrics = run_prune_round(
        manifest, folds, prune_list, pipeline, sched, trainer=trainer, round_index=0
    )
    log.rounds.append(metrics)
    for r in range(1, n_rounds + 1):
        candidate = select_prune_candidate(metrics.misclass_counts, metrics.mean_scores)
        prune_list.append(candidate)
        metrics = replace(
            run_prune_round(
                manifest, folds, prune_list, pipeline, sched, trainer=trainer, round_index=r
            ),
            pruned_id=candidate,
        )
        log.rounds.append(metrics)
    log.prune_list = prune_list
    log.validate(manifest)
    return log


def make_classifier_trainer(pipeline, classifier_cfg=None, image_loader=None, mask_lookup=None):
    """Build the real training engine: preprocess every record once through
    ``pipeline`` (images a pipeline excludes are dropped from training and
    scored 0.5), then train a fresh classifier per (round, fold).
    ``mask_lookup(record)`` may supply gold-standard masks to the pipeline.
    """
    from . import classifier as cls
    from .ingest import load_image

    cfg = classifier_cfg or cls.ClassifierConfig()
    loader = image_loader or load_image
    cache: dict[str, object] = {}

    def prepared(record: ImageRecord):
        if record.id not in cache:
            gold = mask_lookup(record) if mask_lookup else None
            cache[record.id] = pipeline(loader(record), gold_mask=gold)
        return cache[record.id]

    def trainer(train_records, val_records, sched, fold_index, round_index):
        def items(records):
            out = []
            for r in records:
                res = prepared(r)
                if res.excluded:
                    continue
                out.append((res.image, 1 if r.label == "nodule" else 0))
            return out

        seed = int(
            np.random.SeedSequence([sched.seed, round_index, fold_index]).generate_state(1)[0]
        )
        model = cls.build_classifier(cfg, seed=seed)
        fold_sched = cls.TrainSchedule(
            phase1=sched.phase1,
            phase2=sched.phase2,
            batch_size=sched.batch_size,
            input_size=sched.input_size,
            seed=seed,
        )
        model, _ = cls.train_fold(model, items(train_records), items(val_records), fold_sched)

        def scorer(records):
            probs = np.full(len(records), 0.5)
            keep, imgs = [], []
            for j, r in enumerate(records):
                res = prepared(r)
                if not res.excluded:
                    keep.append(j)
                    imgs.append(res.image)
            if imgs:
                probs[keep] = cls.predict_batch(model, imgs)
            return probs

        return scorer

    return trainer


# ---------------------------------------------------------------------------
# persistence


def save_prune_log(log: PruneLog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = len(log.rounds[0].fold_aucs) if log.rounds else 0
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "pruned_id"] + [f"auc_f{i}" for i in range(k)] + ["auc_mean", "auc_std"]
        )
        for r in log.rounds:
            writer.writerow(
                [r.round_index, r.pruned_id or ""]
                + [f"{a:.6f}" for a in r.fold_aucs]
                + [f"{r.auc_mean:.6f}", f"{r.auc_std:.6f}"]
            )
    with open(out / "prune_list.txt", "w") as fh:
        for rec_id in log.prune_list:
            fh.write(rec_id + "\n")
    rounds_dir = out / "rounds"
    rounds_dir.mkdir(exist_ok=True)
    for r in log.rounds:
        with open(rounds_dir / f"misclass_round_{r.round_index:03d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "count", "mean_score"])
            order = sorted(
                r.misclass_counts,
                key=lambda i: (-r.misclass_counts[i], r.mean_scores[i], i),
            )
            for rec_id in order:
                writer.writerow(
                    [rec_id, r.misclass_counts[rec_id], f"{r.mean_scores[rec_id]:.6f}"]
                )
    payload = {
        "seed": log.seed,
        "config": log.config,
        "prune_list": log.prune_list,
        "rounds": [
            {
                "round_index": r.round_index,
                "pruned_id": r.pruned_id,
                "fold_aucs": list(r.fold_aucs),
                "auc_mean": r.auc_mean,
                "auc_std": r.auc_std,
                "misclass_counts": r.misclass_counts,
                "mean_scores": r.mean_scores,
            }
            for r in log.rounds
        ],
    }
    (out / "prunelog.json").write_text(json.dumps(payload, indent=2))


def load_prune_log(log_dir) -> PruneLog:
    payload = json.loads((Path(log_dir) / "prunelog.json").read_text())
    rounds = [
        RoundMetrics(
            round_index=r["round_index"],
            pruned_id=r["pruned_id"],
            fold_aucs=tuple(r["fold_aucs"]),
            auc_mean=r["auc_mean"],
            auc_std=r["auc_std"],
            misclass_counts={k: int(v) for k, v in r["misclass_counts"].items()},
            mean_scores={k: float(v) for k, v in r["mean_scores"].items()},
        )
        for r in payload["rounds"]
    ]
    log = PruneLog(
        rounds=rounds,
        prune_list=list(payload["prune_list"]),
        config=payload.get("config", {}),
        seed=payload.get("seed", 0),
    )
    log.validate()
    return log
