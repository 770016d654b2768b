import numpy as np
import pytest
from helpers import encode_jsrt_raw, make_manifest, make_record, write_dicom

from cxrdebias.errors import CorruptSampleError, IngestError, MalformedFileError, SchemaError
from cxrdebias.ingest import (
    DatasetManifest,
    ImageRecord,
    convert_dicom,
    load_folds,
    load_manifest,
    read_jsrt_raw,
    save_folds,
    save_manifest,
    stratified_kfold,
)


class TestReadRaw:
    def test_size_forced_by_geometry(self, tmp_path):
        p = tmp_path / "a.img"
        pixels = np.zeros((2048, 16), np.uint16)  # keep the file small but exact
        p.write_bytes(encode_jsrt_raw(pixels))
        img = read_jsrt_raw(p, 16, 2048)
        assert (img.width, img.height, img.depth) == (16, 2048, 12)

    def test_malformed_size(self, tmp_path):
        p = tmp_path / "bad.img"
        p.write_bytes(b"\x00" * 100)
        with pytest.raises(MalformedFileError):
            read_jsrt_raw(p, 2048, 2048)

    def test_hand_decoded_big_endian(self, tmp_path):
        p = tmp_path / "two.img"
        p.write_bytes(bytes([0x0F, 0xFF, 0x00, 0x00]))
        img = read_jsrt_raw(p, 2, 1)
        assert img.pixels.ravel().tolist() == [4095, 0]

    def test_corrupt_sample(self, tmp_path):
        p = tmp_path / "hot.img"
        p.write_bytes(bytes([0x10, 0x00, 0x00, 0x00]))  # 4096 > 4095
        with pytest.raises(CorruptSampleError):
            read_jsrt_raw(p, 2, 1)

    def test_invert_flag(self, tmp_path):
        p = tmp_path / "inv.img"
        p.write_bytes(bytes([0x0F, 0xFF, 0x00, 0x00]))
        img = read_jsrt_raw(p, 2, 1, invert=True)
        assert img.pixels.ravel().tolist() == [0, 4095]

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        pixels = rng.integers(0, 4096, (13, 17)).astype(np.uint16)
        p = tmp_path / "rt.img"
        p.write_bytes(encode_jsrt_raw(pixels))
        img = read_jsrt_raw(p, 17, 13)
        assert (img.pixels == pixels).all()
        assert encode_jsrt_raw(img.pixels) == p.read_bytes()


class TestConvertDicom:
    def test_target_geometry_and_depth(self, tmp_path):
        p = tmp_path / "a.dcm"
        rng = np.random.default_rng(0)
        write_dicom(p, rng.integers(0, 4096, (64, 64)).astype(np.uint16))
        img = convert_dicom(p, 32)
        assert (img.width, img.height, img.depth) == (32, 32, 8)

    def test_constant_input_uniform_output(self, tmp_path):
        p = tmp_path / "c.dcm"
        write_dicom(p, np.full((16, 16), 777, np.uint16))
        img = convert_dicom(p, 16)
        assert len(np.unique(img.pixels)) == 1

    def test_min_max_rescale(self, tmp_path):
        p = tmp_path / "g.dcm"
        write_dicom(p, np.array([[0, 1000], [2000, 3000]], np.uint16))
        img = convert_dicom(p, 2)
        assert img.pixels.ravel().tolist() == [0, 85, 170, 255]

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "junk.dcm"
        p.write_bytes(b"not a dicom at all")
        with pytest.raises(IngestError):
            convert_dicom(p, 32)

    def test_multi_frame_rejected(self, tmp_path):
        p = tmp_path / "mf.dcm"
        frames = np.zeros((3, 8, 8), np.uint16)
        write_dicom(p, frames, n_frames=3)
        with pytest.raises(IngestError):
            convert_dicom(p, 8)

    def test_non_square_letterboxed(self, tmp_path):
        p = tmp_path / "rect.dcm"
        write_dicom(p, np.full((8, 16), 4000, np.uint16))
        img = convert_dicom(p, 16)
        assert img.pixels.shape == (16, 16)
        # content occupies the middle band, background pads above and below
        assert (img.pixels[0, :] == 0).all()


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        manifest = make_manifest(3, 2)
        path = tmp_path / "m.csv"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.class_counts == (3, 2)
        assert loaded.ids() == manifest.ids()
        rec = loaded.by_id("N0001")
        assert rec.nodule_center == (10.0, 20.0)
        assert rec.nodule_size_mm == 8.0

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "empty.csv"
        save_manifest(DatasetManifest(()), path)
        assert load_manifest(path).class_counts == (0, 0)

    def test_duplicate_id(self):
        with pytest.raises(SchemaError):
            DatasetManifest((make_record("X"), make_record("X")))

    def test_unknown_label(self):
        with pytest.raises(SchemaError):
            make_record("X", label="maybe")

    def test_geometry_on_non_nodule(self):
        with pytest.raises(SchemaError):
            ImageRecord(id="X", source="JSRT", path="x.png", label="non_nodule",
                        nodule_size_mm=30.0)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,source,path\nX,JSRT,x.png\n")
        with pytest.raises(SchemaError):
            load_manifest(path)

    def test_schema_error_names_row(self, tmp_path):
        manifest = make_manifest(1, 1)
        path = tmp_path / "m.csv"
        save_manifest(manifest, path)
        text = path.read_text().replace("non_nodule", "mystery")
        path.write_text(text)
        with pytest.raises(SchemaError, match="row 3"):
            load_manifest(path)

    def test_generated_rows_property(self, tmp_path):
        # valid rows always load; every invariant-violating mutation is rejected
        rng = np.random.default_rng(23)
        for trial in range(20):
            n_nod, n_non = int(rng.integers(0, 5)), int(rng.integers(0, 5))
            manifest = make_manifest(n_nod, n_non)
            path = tmp_path / f"t{trial}.csv"
            save_manifest(manifest, path)
            assert load_manifest(path).class_counts == (n_nod, n_non)
        bad_rows = [
            "A,JSRT,x.png,nodule,very_obvious,,,,p",        # unknown subtlety
            "A,NIH,x.png,nodule,,,,,p",                     # unknown source
            "A,JSRT,x.png,non_nodule,,5,6,,p",              # geometry on non_nodule
            "A,JSRT,x.png,nodule,,5,,,p",                   # x without y
            ",JSRT,x.png,nodule,,,,,p",                     # empty id
        ]
        header = "id,source,path,label,subtlety,nodule_x,nodule_y,nodule_size_mm,patient_id"
        for i, row in enumerate(bad_rows):
            path = tmp_path / f"bad{i}.csv"
            path.write_text(f"{header}\n{row}\n")
            with pytest.raises(SchemaError):
                load_manifest(path)


class TestStratifiedKFold:
    def test_jsrt_shaped_counts(self):
        manifest = make_manifest(154, 93)
        folds = stratified_kfold(manifest, 4, seed=0)
        per_fold_nod = [0] * 4
        per_fold_non = [0] * 4
        for rec in manifest.records:
            f = folds.assignment[rec.id]
            if rec.label == "nodule":
                per_fold_nod[f] += 1
            else:
                per_fold_non[f] += 1
        assert sorted(per_fold_nod) == [38, 38, 39, 39]
        assert sorted(per_fold_non) == [23, 23, 23, 24]

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            stratified_kfold(make_manifest(4, 4), 1, seed=0)

    def test_class_smaller_than_k(self):
        with pytest.raises(ValueError):
            stratified_kfold(make_manifest(10, 2), 4, seed=0)

    def test_deterministic(self):
        manifest = make_manifest(20, 12)
        a = stratified_kfold(manifest, 4, seed=9)
        b = stratified_kfold(manifest, 4, seed=9)
        assert a.assignment == b.assignment

    def test_partition_property(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n_nod = int(rng.integers(6, 40))
            n_non = int(rng.integers(6, 40))
            k = int(rng.integers(2, 6))
            if min(n_nod, n_non) < k:
                continue
            manifest = make_manifest(n_nod, n_non)
            folds = stratified_kfold(manifest, k, seed=int(rng.integers(0, 1000)))
            assert sorted(folds.assignment) == sorted(manifest.ids())
            for label, total in (("nodule", n_nod), ("non_nodule", n_non)):
                sizes = [0] * k
                for rec in manifest.records:
                    if rec.label == label:
                        sizes[folds.assignment[rec.id]] += 1
                assert sum(sizes) == total
                assert max(sizes) - min(sizes) <= 1

    def test_fold_csv_round_trip(self, tmp_path):
        manifest = make_manifest(8, 8)
        folds = stratified_kfold(manifest, 4, seed=2)
        path = tmp_path / "folds.csv"
        save_folds(folds, path)
        loaded = load_folds(path)
        assert loaded.k == 4
        assert loaded.assignment == folds.assignment
