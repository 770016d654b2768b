"""Command-line surface.

Subcommands: ingest, phantom, split, train-seg, train-ribsup, preprocess,
prune, train-master, external-test, report. Exit codes: 0 success,
1 runtime failure, 2 usage error. Long-running commands stream progress to
stderr. Write subcommands refuse to overwrite existing outputs unless
--force is given. Run-style commands (prune, external-test) write under
<out>/<experiment>/<timestamp>/ with fixed filenames and snapshot their
effective config.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from . import ablation, ingest, lungseg, phantom, pruning, report, ribsup
from .errors import PipelineError
from .imgops import equalize_histogram, letterbox
from .rasters import GrayImage, load_mask_png, load_png, save_png
from .runconfig import RunConfig, load_config, snapshot_config


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise PipelineError(f"{path} already exists; pass --force to overwrite")


def _run_dir(out_root, experiment: str, run_dir) -> Path:
    if run_dir:
        d = Path(run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        d = Path(out_root) / experiment / stamp
    (d / "figures").mkdir(parents=True, exist_ok=True)
    return d


def _load_manifest_resolved(path) -> ingest.DatasetManifest:
    manifest = ingest.load_manifest(path)
    return manifest.with_paths_resolved(Path(path).parent)


def _mask_lookup(masks_dir):
    if masks_dir is None:
        return None
    root = Path(masks_dir)

    def lookup(record):
        p = root / f"{record.id}.png"
        return load_mask_png(p) if p.exists() else None

    return lookup


def _pipeline_models(args) -> ablation.PipelineModels:
    seg = lungseg.load_seg_model(args.seg_model) if getattr(args, "seg_model", None) else None
    supp = ribsup.load_supp_model(args.ribsup_model) if getattr(args, "ribsup_model", None) else None
    return ablation.PipelineModels(seg=seg, supp=supp)


def _config_from_args(args) -> RunConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "experiment",
            "seed",
            "k_folds",
            "rounds",
            "input_size",
            "batch_size",
            "phase1_lr",
            "phase1_epochs",
            "phase2_lr",
            "phase2_epochs",
            "closing_kernel",
            "min_hole_area_fraction",
            "qc_secondary_ratio",
            "backbone",
            "head_pooling",
            "head_hidden",
            "head_dropout",
            "freeze_phase1",
            "freeze_phase2",
            "pretrained",
        )
    }
    return load_config(getattr(args, "config", None), overrides)


def _add_config_options(p: argparse.ArgumentParser, schedule: bool = True) -> None:
    p.add_argument("--config", help="TOML config file; flags override file values")
    p.add_argument("--seed", type=int, default=None)
    if schedule:
        p.add_argument("--input-size", dest="input_size", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--phase1-lr", dest="phase1_lr", type=float, default=None)
        p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=None)
        p.add_argument("--phase2-lr", dest="phase2_lr", type=float, default=None)
        p.add_argument("--phase2-epochs", dest="phase2_epochs", type=int, default=None)
        p.add_argument("--backbone", default=None)
        p.add_argument("--head-pooling", dest="head_pooling", default=None)
        p.add_argument("--freeze-phase1", dest="freeze_phase1", default=None)
        p.add_argument("--freeze-phase2", dest="freeze_phase2", default=None)
        p.add_argument("--pretrained", choices=["auto", "never"], default=None)
    p.add_argument("--closing-kernel", dest="closing_kernel", type=int, default=None)
    p.add_argument(
        "--min-hole-area-fraction", dest="min_hole_area_fraction", type=float, default=None
    )
    p.add_argument("--qc-ratio", dest="qc_secondary_ratio", type=float, default=None)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_phantom(args) -> int:
    out = Path(args.out)
    _guard(out / "manifest.csv", args.force)
    manifest = phantom.generate_corpus(
        n_per_class=args.n,
        confounder_policy=args.confounder,
        seed=args.seed,
        out_dir=out,
        size=args.size,
        emit_ribfree=args.emit_ribfree,
    )
    counts = manifest.class_counts
    _progress(f"wrote {counts[0]} nodule + {counts[1]} non-nodule phantoms to {out}")
    print(out / "manifest.csv")
    return 0


def _cmd_ingest(args) -> int:
    manifest = ingest.load_manifest(args.manifest)
    src_root = Path(args.manifest).parent
    out = Path(args.out)
    _guard(out / "manifest.csv", args.force)
    (out / "images").mkdir(parents=True, exist_ok=True)
    converted = []
    for i, rec in enumerate(manifest.records):
        src = Path(rec.path) if Path(rec.path).is_absolute() else src_root / rec.path
        suffix = src.suffix.lower()
        if suffix == ".png":
            img = load_png(src)
        elif suffix in (".dcm", ".dicom"):
            img = ingest.convert_dicom(src, args.size)
        else:
            raw = ingest.read_jsrt_raw(
                src, args.jsrt_width, args.jsrt_height, invert=not args.no_invert
            )
            img = GrayImage((equalize_histogram(raw).pixels >> 4).astype("uint8"), 8)
        img = equalize_histogram(letterbox(img, args.size))
        rel = f"images/{rec.id}.png"
        save_png(img, out / rel)
        converted.append(ingest.ImageRecord(**{**rec.__dict__, "path": rel}))
        if (i + 1) % 25 == 0:
            _progress(f"converted {i + 1}/{len(manifest.records)}")
    ingest.save_manifest(ingest.DatasetManifest(tuple(converted)), out / "manifest.csv")
    print(out / "manifest.csv")
    return 0


def _cmd_split(args) -> int:
    manifest = ingest.load_manifest(args.manifest)
    _guard(Path(args.out), args.force)
    folds = ingest.stratified_kfold(manifest, args.k, args.seed)
    ingest.save_folds(folds, args.out)
    print(args.out)
    return 0


def _load_seg_pairs(images_dir, masks_dir):
    pairs = []
    for img_path in sorted(Path(images_dir).glob("*.png")):
        mask_path = Path(masks_dir) / img_path.name
        if mask_path.exists():
            pairs.append((load_png(img_path), load_mask_png(mask_path)))
    return pairs


def _cmd_train_seg(args) -> int:
    out = Path(args.out)
    _guard(out / "model.json", args.force)
    pairs = _load_seg_pairs(args.images_dir, args.masks_dir)
    _progress(f"training lung segmenter on {len(pairs)} pairs")
    cfg = lungseg.SegTrainConfig(
        input_size=args.input_size,
        widths=tuple(int(w) for w in args.widths.split(",")),
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        val_fraction=args.val_fraction,
        seed=args.seed,
    )
    model, history = lungseg.train_segmenter(pairs, cfg)
    lungseg.save_seg_model(model, out)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    _progress(f"best validation dice {model.best_val_dice:.4f} at epoch {model.best_epoch}")
    print(out)
    return 0


def _cmd_train_ribsup(args) -> int:
    out = Path(args.out)
    _guard(out / "model.json", args.force)
    pairs = []
    for img_path in sorted(Path(args.images_dir).glob("*.png")):
        target_path = Path(args.targets_dir) / img_path.name
        if target_path.exists():
            pairs.append((load_png(img_path), load_png(target_path)))
    _progress(f"training rib suppressor on {len(pairs)} pairs")
    cfg = ribsup.SuppressorTrainConfig(
        input_size=args.input_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        loss=args.loss,
        val_fraction=args.val_fraction,
        seed=args.seed,
    )
    model, history = ribsup.train_suppressor(pairs, cfg)
    ribsup.save_supp_model(model, out)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    _progress(f"best validation loss {model.best_val_loss:.6f} at epoch {model.best_epoch}")
    print(out)
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _config_from_args(args)
    manifest = _load_manifest_resolved(args.manifest)
    out = Path(args.out)
    _guard(out / "manifest.csv", args.force)
    (out / "images").mkdir(parents=True, exist_ok=True)
    pipeline = ablation.compose_pipeline(
        ablation.experiment_config(cfg.experiment),
        _pipeline_models(args),
        input_size=cfg.input_size,
        repair_params=cfg.repair_params(),
        qc_secondary_ratio=cfg.qc_secondary_ratio,
    )
    items, excluded = ablation.preprocess_records(
        manifest.records, pipeline, mask_lookup=_mask_lookup(args.masks_dir)
    )
    kept = []
    for rec, img in items:
        rel = f"images/{rec.id}.png"
        save_png(img, out / rel)
        kept.append(ingest.ImageRecord(**{**rec.__dict__, "path": rel}))
    ingest.save_manifest(ingest.DatasetManifest(tuple(kept)), out / "manifest.csv")
    with open(out / "excluded.csv", "w") as fh:
        fh.write("id,reason\n")
        for rec, reason in excluded:
            fh.write(f"{rec.id},{reason}\n")
    snapshot_config(cfg, out / "config.toml")
    _progress(f"processed {len(kept)} images, excluded {len(excluded)}")
    print(out / "manifest.csv")
    return 0


def _cmd_prune(args) -> int:
    cfg = _config_from_args(args)
    manifest = _load_manifest_resolved(args.manifest)
    folds = (
        ingest.load_folds(args.folds)
        if args.folds
        else ingest.stratified_kfold(manifest, cfg.k_folds, cfg.seed)
    )
    run_dir = _run_dir(cfg.out_dir if args.out is None else args.out, cfg.experiment, args.run_dir)
    pipeline = ablation.compose_pipeline(
        ablation.experiment_config(cfg.experiment),
        _pipeline_models(args),
        input_size=cfg.input_size,
        repair_params=cfg.repair_params(),
        qc_secondary_ratio=cfg.qc_secondary_ratio,
    )
    trainer = pruning.make_classifier_trainer(
        pipeline,
        classifier_cfg=cfg.classifier_config(),
        mask_lookup=_mask_lookup(args.masks_dir),
    )
    rounds = cfg.rounds if str(cfg.rounds) == "to_balance" else int(cfg.rounds)
    _progress(f"pruning experiment {cfg.experiment}, rounds={rounds}")
    log = pruning.evolutionary_prune(
        manifest,
        folds,
        pipeline,
        cfg.schedule(),
        rounds=rounds,
        trainer=trainer,
        config={"experiment": cfg.experiment, "k_folds": folds.k, "rounds": str(rounds)},
    )
    pruning.save_prune_log(log, run_dir)
    ingest.save_folds(folds, run_dir / "folds.csv")
    report.render_auc_curve(log, args.target, run_dir / "figures" / "auc_curve.png")
    snapshot_config(cfg, run_dir / "config.toml")
    summary = {
        "experiment": cfg.experiment,
        "rounds": len(log.rounds) - 1,
        "final_auc_mean": log.rounds[-1].auc_mean,
        "final_auc_std": log.rounds[-1].auc_std,
        "stable_threshold": pruning.stable_threshold(log.auc_mean_series(), args.target),
        "target": args.target,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    _progress(f"final AUC {summary['final_auc_mean']:.3f} +/- {summary['final_auc_std']:.3f}")
    print(run_dir)
    return 0


def _cmd_train_master(args) -> int:
    cfg = _config_from_args(args)
    manifest = _load_manifest_resolved(args.manifest)
    prune_list = (
        [line.strip() for line in Path(args.prune_list).read_text().splitlines() if line.strip()]
        if args.prune_list
        else []
    )
    out = Path(args.out)
    _guard(out / "model.json", args.force)
    _progress(f"training master model for experiment {cfg.experiment}")
    model = ablation.train_master(
        manifest,
        prune_list,
        ablation.experiment_config(cfg.experiment),
        cfg.schedule(),
        _pipeline_models(args),
        classifier_cfg=cfg.classifier_config(),
        mask_lookup=_mask_lookup(args.masks_dir),
    )
    from .classifier import save_cls_model

    save_cls_model(model, out)
    snapshot_config(cfg, out / "config.toml")
    _progress(f"best val loss {model.best_val_loss:.4f} at epoch {model.best_epoch}")
    print(out)
    return 0


def _cmd_external_test(args) -> int:
    cfg = _config_from_args(args)
    manifest = _load_manifest_resolved(args.manifest)
    from .classifier import load_cls_model

    model = load_cls_model(args.model)
    run_dir = _run_dir(cfg.out_dir if args.out is None else args.out, cfg.experiment, args.run_dir)
    pipeline = ablation.compose_pipeline(
        ablation.experiment_config(cfg.experiment),
        _pipeline_models(args),
        input_size=model.input_size or cfg.input_size,
        repair_params=cfg.repair_params(),
        qc_secondary_ratio=cfg.qc_secondary_ratio,
    )
    result = ablation.external_test(
        model, manifest, pipeline, mask_lookup=_mask_lookup(args.masks_dir)
    )
    ablation.save_external_result(
        result,
        run_dir / "external.csv",
        run_dir / "summary.json",
        config={"experiment": cfg.experiment},
    )
    report.render_scatter(result, run_dir / "figures" / "scatter.png")
    snapshot_config(cfg, run_dir / "config.toml")
    _progress(
        f"external accuracy {result.accuracy:.2%} over {len(result.per_image)} images "
        f"({len(result.excluded)} excluded)"
    )
    print(run_dir)
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = pruning.load_prune_log(args.log)
    report.render_auc_curve(log, args.target, out / "auc_curve.png")
    if args.manifest:
        manifest = ingest.load_manifest(args.manifest)
        top_n = min(args.top_n, len(log.prune_list))
        report.report_pruned_records(log, manifest, top_n, out / "pruned_records.csv")
    _progress(f"report written to {out}")
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrdebias",
        description="Chest X-ray debiasing pipeline: ingest, phantoms, "
        "segmentation, rib suppression, evolutionary pruning, ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="images per class")
    p.add_argument(
        "--confounder",
        choices=["correlated", "anticorrelated", "absent"],
        default="absent",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=192)
    p.add_argument("--emit-ribfree", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("ingest", help="convert raw films / DICOM to an 8-bit PNG corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--no-invert", action="store_true",
                   help="skip the photometric inversion applied to raw films")
    p.add_argument("--jsrt-width", type=int, default=2048)
    p.add_argument("--jsrt-height", type=int, default=2048)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="stratified k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train-seg", help="train the residual U-Net lung segmenter")
    p.add_argument("--images-dir", required=True)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input-size", type=int, default=512)
    p.add_argument("--widths", default="16,32,64,128,256")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_train_seg)

    p = sub.add_parser("train-ribsup", help="train the rib-suppression network")
    p.add_argument("--images-dir", required=True)
    p.add_argument("--targets-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--loss", choices=list(ribsup.LOSSES), default="mse_plus_structural")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_train_ribsup)

    p = sub.add_parser("preprocess", help="batch-apply an experiment pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--experiment", default=None)
    p.add_argument("--seg-model")
    p.add_argument("--ribsup-model")
    p.add_argument("--masks-dir", help="gold-standard masks, used instead of predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_options(p)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("prune", help="run the evolutionary pruning loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", help="fold CSV; defaults to a fresh stratified split")
    p.add_argument("--experiment", default=None)
    p.add_argument("--rounds", default=None, help="integer or 'to_balance'")
    p.add_argument("--k-folds", dest="k_folds", type=int, default=None)
    p.add_argument("--seg-model")
    p.add_argument("--ribsup-model")
    p.add_argument("--masks-dir")
    p.add_argument("--out", default=None)
    p.add_argument("--run-dir", help="exact output directory (otherwise timestamped)")
    p.add_argument("--target", type=float, default=0.8)
    _add_config_options(p)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("train-master", help="train the post-pruning master model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prune-list")
    p.add_argument("--experiment", default=None)
    p.add_argument("--seg-model")
    p.add_argument("--ribsup-model")
    p.add_argument("--masks-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_options(p)
    p.set_defaults(func=_cmd_train_master)

    p = sub.add_parser("external-test", help="inference-only generalization test")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--experiment", default=None)
    p.add_argument("--seg-model")
    p.add_argument("--ribsup-model")
    p.add_argument("--masks-dir")
    p.add_argument("--out", default=None)
    p.add_argument("--run-dir")
    _add_config_options(p)
    p.set_defaults(func=_cmd_external_test)

    p = sub.add_parser("report", help="render figures and tables from a prune log")
    p.add_argument("--log", required=True, help="run directory holding prunelog.json")
    p.add_argument("--manifest")
    p.add_argument("--target", type=float, default=0.8)
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def cli_dispatch(argv) -> int:
    """Parse argv (excluding the program name) and run the subcommand.
    Returns the process exit code instead of raising SystemExit."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
