import numpy as np
import pytest
import torch
from helpers import make_manifest

from cxrdebias import ablation
from cxrdebias.ablation import (
    ExperimentConfig,
    PipelineModels,
    compose_pipeline,
    experiment_config,
    external_test,
    make_experiment_configs,
    preprocess_records,
    save_external_result,
    train_master,
)
from cxrdebias.classifier import ClassifierConfig, PhaseSpec, TrainSchedule
from cxrdebias.errors import ConfigurationError, EvaluationError
from cxrdebias.imgops import equalize_histogram, letterbox
from cxrdebias.ingest import DatasetManifest
from cxrdebias.lungseg import SegModel
from cxrdebias.phantom import Marker, default_spec, generate_phantom, marker_region
from cxrdebias.ribsup import SuppModel, SuppressorNet


class _ConstLogitNet(torch.nn.Module):
    """Stand-in segmentation net emitting one constant logit everywhere."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), self.value)


def full_mask_seg_model(size=64):
    return SegModel(net=_ConstLogitNet(10.0), input_size=size, widths=(4,))


class _IdentityNet(torch.nn.Module):
    def forward(self, x):
        return x


def identity_suppressor():
    return SuppModel(net=_IdentityNet(), input_size=64)


def zeroing_suppressor():
    return SuppModel(net=_ConstLogitNet(-1.0), input_size=64)


class TestExperimentConfigs:
    def test_exact_table(self):
        configs = make_experiment_configs()
        assert len(configs) == 6
        triples = {
            c.label: (c.segmentation, c.cropping, c.rib_suppression) for c in configs
        }
        assert triples == {
            "A": (False, False, False),
            "B": (False, False, True),
            "C": (True, False, False),
            "D": (True, False, True),
            "E": (True, True, False),
            "F": (True, True, True),
        }

    def test_f_has_all_flags(self):
        f = experiment_config("F")
        assert f.segmentation and f.cropping and f.rib_suppression

    def test_cropping_requires_segmentation(self):
        with pytest.raises(ValueError):
            ExperimentConfig("E", segmentation=False, cropping=True, rib_suppression=False)

    def test_label_triple_consistency(self):
        with pytest.raises(ValueError):
            ExperimentConfig("A", segmentation=True, cropping=False, rib_suppression=False)

    def test_no_config_crops_without_segmentation(self):
        for c in make_experiment_configs():
            assert not (c.cropping and not c.segmentation)


class TestComposePipeline:
    def test_config_a_is_equalize_and_resize_only(self):
        pipeline = compose_pipeline(experiment_config("A"), PipelineModels(), input_size=48)
        img, _, _ = generate_phantom(default_spec(size=64, seed=3))
        out = pipeline(img)
        assert not out.excluded
        want = letterbox(equalize_histogram(img), 48)
        assert (out.image.pixels == want.pixels).all()

    def test_missing_segmentation_model(self):
        with pytest.raises(ConfigurationError):
            compose_pipeline(experiment_config("C"), PipelineModels())

    def test_missing_suppression_model(self):
        with pytest.raises(ConfigurationError):
            compose_pipeline(experiment_config("B"), PipelineModels())

    def test_config_f_removes_marker_with_gold_mask(self):
        from cxrdebias.imgops import apply_mask, close_crop
        from cxrdebias.ribsup import suppress_bones

        spec = default_spec(size=64, seed=5, marker=Marker("top_left", side=10))
        img, mask, _ = generate_phantom(spec)
        r0, c0, r1, c1 = marker_region(spec)
        assert (img.pixels[r0:r1, c0:c1] >= 200).any()
        pipeline = compose_pipeline(
            experiment_config("F"),
            PipelineModels(seg=full_mask_seg_model(), supp=identity_suppressor()),
            input_size=64,
        )
        out = pipeline(img, gold_mask=mask)
        assert not out.excluded
        # the mask zeroes every marker pixel before cropping ...
        masked = apply_mask(suppress_bones(identity_suppressor(), equalize_histogram(img)),
                            mask)
        assert (masked.pixels[r0:r1, c0:c1] == 0).all()
        # ... and the pipeline output equals the hand-built composition exactly
        cropped, _ = close_crop(masked)
        want = letterbox(cropped, 64)
        assert (out.image.pixels == want.pixels).all()

    def test_marker_truly_gone_without_suppressor(self):
        spec = default_spec(size=64, seed=5, noise_sigma=0.0,
                            marker=Marker("top_left", side=10))
        img, mask, _ = generate_phantom(spec)
        pipeline = compose_pipeline(
            experiment_config("E"),
            PipelineModels(seg=full_mask_seg_model()),
            input_size=64,
        )
        out = pipeline(img, gold_mask=mask)
        # marker pixels equalize to the very top of the range; inside the
        # cropped lung field nothing reaches them
        eq = equalize_histogram(img)
        marker_level = eq.pixels[marker_region(spec)[0], marker_region(spec)[1]]
        assert (out.image.pixels < int(marker_level)).all()

    def test_qc_failure_marks_excluded(self):
        # a constant all-foreground prediction has a single contour
        pipeline = compose_pipeline(
            experiment_config("C"),
            PipelineModels(seg=full_mask_seg_model()),
            input_size=48,
        )
        img, _, _ = generate_phantom(default_spec(size=64, seed=1))
        out = pipeline(img)
        assert out.excluded and out.reason == "too_few_contours"
        assert out.image is None

    def test_terminal_resize_for_all_configs(self):
        img, mask, _ = generate_phantom(default_spec(size=96, seed=2))
        models = PipelineModels(seg=full_mask_seg_model(), supp=identity_suppressor())
        for cfg in make_experiment_configs():
            pipeline = compose_pipeline(cfg, models, input_size=40)
            out = pipeline(img, gold_mask=mask)
            assert not out.excluded
            assert out.image.pixels.shape == (40, 40)

    def test_empty_after_masking_excluded(self):
        img, mask, _ = generate_phantom(default_spec(size=64, seed=2))
        pipeline = compose_pipeline(
            experiment_config("F"),
            PipelineModels(seg=full_mask_seg_model(), supp=zeroing_suppressor()),
            input_size=40,
        )
        out = pipeline(img, gold_mask=mask)
        assert out.excluded and out.reason == "empty_after_masking"


def _corpus(tmp_path, n=4, policy="absent", seed=0):
    from cxrdebias.phantom import generate_corpus

    manifest = generate_corpus(n, policy, seed=seed, out_dir=tmp_path, size=64)
    return manifest.with_paths_resolved(tmp_path)


class TestPreprocessRecords:
    def test_exclusion_bookkeeping(self, tmp_path):
        manifest = _corpus(tmp_path, n=3)
        pipeline = compose_pipeline(
            experiment_config("C"), PipelineModels(seg=full_mask_seg_model()), input_size=32
        )
        items, excluded = preprocess_records(manifest.records, pipeline)
        assert len(items) + len(excluded) == len(manifest.records)
        # the constant net always yields a single contour -> all excluded
        assert len(items) == 0

    def test_gold_masks_bypass_qc(self, tmp_path):
        manifest = _corpus(tmp_path, n=3)
        from cxrdebias.rasters import load_mask_png

        pipeline = compose_pipeline(
            experiment_config("C"), PipelineModels(seg=full_mask_seg_model()), input_size=32
        )
        lookup = lambda rec: load_mask_png(tmp_path / "masks" / f"{rec.id}.png")
        items, excluded = preprocess_records(manifest.records, pipeline, mask_lookup=lookup)
        assert len(excluded) == 0 and len(items) == len(manifest.records)


class TestTrainMaster:
    def test_unbalanced_rejected(self, tmp_path):
        manifest = _corpus(tmp_path, n=3)
        unbalanced = DatasetManifest(manifest.records[:-1])
        with pytest.raises(ValueError):
            train_master(
                unbalanced, [], experiment_config("A"),
                TrainSchedule(phase1=PhaseSpec(1e-3, 1), phase2=PhaseSpec(1e-5, 1),
                              input_size=32, batch_size=4),
                PipelineModels(),
                classifier_cfg=ClassifierConfig(pretrained="never"),
            )

    def test_balanced_run_covers_both_phases(self, tmp_path):
        manifest = _corpus(tmp_path, n=6)
        sched = TrainSchedule(phase1=PhaseSpec(1e-3, 2), phase2=PhaseSpec(1e-5, 1),
                              input_size=32, batch_size=4, seed=0)
        model = train_master(
            manifest, [], experiment_config("A"), sched, PipelineModels(),
            classifier_cfg=ClassifierConfig(pretrained="never"),
        )
        assert [h["phase"] for h in model.history] == [1, 1, 2]
        assert model.input_size == 32

    def test_prune_list_respected(self, tmp_path):
        manifest = _corpus(tmp_path, n=4, policy="absent")
        nodule_ids = [r.id for r in manifest.records if r.label == "nodule"]
        # removing one nodule unbalances the corpus
        with pytest.raises(ValueError):
            train_master(
                manifest, nodule_ids[:1], experiment_config("A"),
                TrainSchedule(phase1=PhaseSpec(1e-3, 1), phase2=PhaseSpec(1e-5, 1),
                              input_size=32, batch_size=4),
                PipelineModels(),
                classifier_cfg=ClassifierConfig(pretrained="never"),
            )


class TestExternalTest:
    def test_accuracy_counts_above_half(self, tmp_path, monkeypatch):
        manifest = _corpus(tmp_path, n=5, policy="absent", seed=3)
        # keep only the 5 nodule records: the all-nodule external case
        nodules = DatasetManifest(
            tuple(r for r in manifest.records if r.label == "nodule")
        )
        probs = np.array([0.9, 0.9, 0.4, 0.6, 0.2])
        monkeypatch.setattr(
            "cxrdebias.classifier.predict_batch", lambda model, imgs: probs[: len(imgs)]
        )
        pipeline = compose_pipeline(experiment_config("A"), PipelineModels(), input_size=32)
        result = external_test(None, nodules, pipeline)
        assert result.accuracy == pytest.approx(3 / 5)
        assert len(result.per_image) == 5 and result.excluded == []

    def test_ten_probability_example(self, tmp_path, monkeypatch):
        manifest = _corpus(tmp_path, n=10, policy="absent", seed=4)
        nodules = DatasetManifest(
            tuple(r for r in manifest.records if r.label == "nodule")
        )
        probs = np.array([0.9, 0.9, 0.4, 0.6, 0.2, 0.7, 0.8, 0.51, 0.49, 0.95])
        monkeypatch.setattr(
            "cxrdebias.classifier.predict_batch", lambda model, imgs: probs[: len(imgs)]
        )
        pipeline = compose_pipeline(experiment_config("A"), PipelineModels(), input_size=32)
        result = external_test(None, nodules, pipeline)
        assert result.accuracy == pytest.approx(0.7)

    def test_labels_used_when_both_classes_present(self, tmp_path, monkeypatch):
        manifest = _corpus(tmp_path, n=2, policy="absent", seed=5)
        # order: nodule, non_nodule, nodule, non_nodule
        probs = np.array([0.9, 0.9, 0.1, 0.1])
        monkeypatch.setattr(
            "cxrdebias.classifier.predict_batch", lambda model, imgs: probs[: len(imgs)]
        )
        pipeline = compose_pipeline(experiment_config("A"), PipelineModels(), input_size=32)
        result = external_test(None, manifest, pipeline)
        # nodule@0.9 correct, non_nodule@0.9 wrong, nodule@0.1 wrong, non_nodule@0.1 correct
        assert result.accuracy == pytest.approx(0.5)

    def test_all_excluded_raises(self, tmp_path):
        manifest = _corpus(tmp_path, n=2)
        pipeline = compose_pipeline(
            experiment_config("C"), PipelineModels(seg=full_mask_seg_model()), input_size=32
        )
        with pytest.raises(EvaluationError):
            external_test(None, manifest, pipeline)

    def test_exclusions_reported(self, tmp_path, monkeypatch):
        manifest = _corpus(tmp_path, n=3, policy="absent", seed=6)
        monkeypatch.setattr(
            "cxrdebias.classifier.predict_batch",
            lambda model, imgs: np.full(len(imgs), 0.8),
        )
        calls = {"i": 0}

        def flaky_pipeline(img, gold_mask=None):
            calls["i"] += 1
            if calls["i"] % 3 == 0:
                return ablation.PipelineOutput(None, True, "too_few_contours")
            return ablation.PipelineOutput(letterbox(img, 32), False, "")

        result = external_test(None, manifest, flaky_pipeline)
        assert len(result.per_image) + len(result.excluded) == len(manifest.records)
        assert all(reason == "too_few_contours" for _, reason in result.excluded)

    def test_save_external_result(self, tmp_path, monkeypatch):
        manifest = _corpus(tmp_path, n=2, policy="absent", seed=7)
        monkeypatch.setattr(
            "cxrdebias.classifier.predict_batch",
            lambda model, imgs: np.linspace(0.1, 0.9, len(imgs)),
        )
        pipeline = compose_pipeline(experiment_config("A"), PipelineModels(), input_size=32)
        result = external_test(None, manifest, pipeline)
        csv_path = tmp_path / "external.csv"
        json_path = tmp_path / "summary.json"
        save_external_result(result, csv_path, json_path, config={"experiment": "A"})
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "id,probability,included,exclusion_reason"
        assert len(lines) == 1 + len(manifest.records)
        import json

        summary = json.loads(json_path.read_text())
        assert summary["included"] == 4 and summary["config"] == {"experiment": "A"}
