"""Dataset ingestion: raw chest-film decoding, DICOM conversion, manifest
CSV schema, and stratified k-fold assignment.

Manifest CSV columns, exact and ordered::

    id, source, path, label, subtlety, nodule_x, nodule_y, nodule_size_mm, patient_id

Empty string encodes an absent optional. Fold assignments persist as a
two-column CSV ``id, fold``.

Raw films are 16-bit big-endian containers holding 12-bit samples. Such
files are conventionally stored photometrically inverted; ``read_jsrt_raw``
decodes as stored (``invert=False``) so the decode matches a byte-level
oracle, while the CLI ``ingest`` subcommand inverts by default behind a
``--no-invert`` flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorruptSampleError, IngestError, MalformedFileError, SchemaError
from .imgops import letterbox
from .rasters import GrayImage, load_png

SOURCES = ("JSRT", "LIDC", "PHANTOM")
LABELS = ("nodule", "non_nodule")
SUBTLETIES = (
    "obvious",
    "relatively_obvious",
    "subtle",
    "very_subtle",
    "extremely_subtle",
)
MANIFEST_COLUMNS = (
    "id",
    "source",
    "path",
    "label",
    "subtlety",
    "nodule_x",
    "nodule_y",
    "nodule_size_mm",
    "patient_id",
)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    source: str
    path: str
    label: str
    subtlety: str | None = None
    nodule_center: tuple[float, float] | None = None
    nodule_size_mm: float | None = None
    patient_id: str = ""

    def __post_init__(self):
        if not self.id:
            raise SchemaError("record id must be non-empty")
        if self.source not in SOURCES:
            raise SchemaError(f"record {self.id}: unknown source {self.source!r}")
        if self.label not in LABELS:
            raise SchemaError(f"record {self.id}: unknown label {self.label!r}")
        if self.subtlety is not None and self.subtlety not in SUBTLETIES:
            raise SchemaError(f"record {self.id}: unknown subtlety {self.subtlety!r}")
        if self.label == "non_nodule":
            if self.nodule_center is not None or self.nodule_size_mm is not None:
                raise SchemaError(
                    f"record {self.id}: non_nodule rows must not carry nodule geometry"
                )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise SchemaError(f"duplicate id {rec.id!r} in manifest")
            seen.add(rec.id)

    @property
    def class_counts(self) -> tuple[int, int]:
        """(nodule_count, non_nodule_count), always recomputed from records."""
        n = sum(1 for r in self.records if r.label == "nodule")
        return n, len(self.records) - n

    def by_id(self, rec_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.id == rec_id:
                return rec
        raise KeyError(rec_id)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def with_paths_resolved(self, root) -> "DatasetManifest":
        root = Path(root)
        recs = tuple(
            replace(r, path=str(root / r.path)) if r.path and not Path(r.path).is_absolute() else r
            for r in self.records
        )
        return DatasetManifest(recs)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]
    seed: int

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]


def read_jsrt_raw(path, width: int, height: int, invert: bool = False) -> GrayImage:
    """Decode a raw film file: two bytes per sample, big-endian, 12-bit data.

    ``invert`` applies the photometric inversion v -> 4095 - v after the
    range check.
    """
    data = Path(path).read_bytes()
    expected = width * height * 2
    if len(data) != expected:
        raise MalformedFileError(
            f"{path}: size {len(data)} != {expected} ({width}x{height}x2 bytes)"
        )
    samples = np.frombuffer(data, dtype=">u2").astype(np.uint16)
    if samples.size and int(samples.max()) > 4095:
        raise CorruptSampleError(
            f"{path}: sample {int(samples.max())} exceeds 12-bit maximum 4095"
        )
    pixels = samples.reshape(height, width)
    if invert:
        pixels = (4095 - pixels).astype(np.uint16)
    return GrayImage(pixels, 12)


def convert_dicom(path, target_size: int) -> GrayImage:
    """Read a single-frame grayscale DICOM and produce a depth-8 square image.

    Intensities are min-max rescaled from the stored pixel values to 0..255;
    non-square frames are letterboxed with background before bilinear
    resampling so anatomy is never stretched.
    """
    import imageio.v2 as iio

    try:
        frame = iio.imread(path, format="DICOM")
    except Exception as exc:
        raise IngestError(f"{path}: unreadable DICOM ({exc})") from exc
    meta = getattr(frame, "meta", {}) or {}
    if int(meta.get("NumberOfFrames", 1)) > 1:
        raise IngestError(f"{path}: multi-frame DICOM not supported")
    arr = np.asarray(frame)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise IngestError(f"{path}: expected a single grayscale frame, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = (arr - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(arr)
    img8 = GrayImage(np.floor(scaled + 0.5).astype(np.uint8), 8)
    return letterbox(img8, target_size)


def _parse_optional_float(value: str, row_no: int, col: str) -> float | None:
    if value == "":
        return None
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"manifest row {row_no}: bad {col} value {value!r}") from None


def load_manifest(path) -> DatasetManifest:
    """Read and validate a manifest CSV. Raises SchemaError naming the first
    offending row on any invariant violation."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise SchemaError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise SchemaError(f"manifest row {row_no}: expected "
                                  f"{len(MANIFEST_COLUMNS)} columns, got {len(row)}")
            rid, source, rel, label, subtlety, nx, ny, size_mm, patient = row
            x = _parse_optional_float(nx, row_no, "nodule_x")
            y = _parse_optional_float(ny, row_no, "nodule_y")
            if (x is None) != (y is None):
                raise SchemaError(f"manifest row {row_no} ({rid}): nodule_x/nodule_y "
                                  "must both be present or both absent")
            try:
                rec = ImageRecord(
                    id=rid,
                    source=source,
                    path=rel,
                    label=label,
                    subtlety=subtlety or None,
                    nodule_center=None if x is None else (x, y),
                    nodule_size_mm=_parse_optional_float(size_mm, row_no, "nodule_size_mm"),
                    patient_id=patient,
                )
            except SchemaError as exc:
                raise SchemaError(f"manifest row {row_no}: {exc}") from None
            records.append(rec)
    return DatasetManifest(tuple(records))


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow([
                r.id,
                r.source,
                r.path,
                r.label,
                r.subtlety or "",
                "" if r.nodule_center is None else f"{r.nodule_center[0]:g}",
                "" if r.nodule_center is None else f"{r.nodule_center[1]:g}",
                "" if r.nodule_size_mm is None else f"{r.nodule_size_mm:g}",
                r.patient_id,
            ])


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldAssignment:
    """Deterministic stratified fold assignment.

    Ids are shuffled per class with a counter-based Philox generator (so the
    split replicates across machines) and dealt round-robin; per-class fold
    sizes therefore differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    by_label = {lab: sorted(r.id for r in manifest.records if r.label == lab)
                for lab in LABELS}
    for lab, ids in by_label.items():
        if ids and len(ids) < k:
            raise ValueError(f"class {lab} has {len(ids)} members, fewer than k={k}")
    rng = np.random.Generator(np.random.Philox(seed))
    assignment: dict[str, int] = {}
    for lab in LABELS:
        ids = np.array(by_label[lab], dtype=object)
        rng.shuffle(ids)
        for pos, rec_id in enumerate(ids):
            assignment[str(rec_id)] = pos % k
    return FoldAssignment(k=k, assignment=assignment, seed=seed)


def save_folds(folds: FoldAssignment, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "fold"])
        for rec_id in sorted(folds.assignment):
            writer.writerow([rec_id, folds.assignment[rec_id]])


def load_folds(path, k: int | None = None, seed: int = 0) -> FoldAssignment:
    assignment: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "fold"]:
            raise SchemaError(f"{path}: fold file header must be id,fold")
        for row in reader:
            assignment[row[0]] = int(row[1])
    if not assignment:
        raise SchemaError(f"{path}: empty fold assignment")
    k = k if k is not None else max(assignment.values()) + 1
    return FoldAssignment(k=k, assignment=assignment, seed=seed)


def load_image(record: ImageRecord) -> GrayImage:
    """Load the raster a record points at (PNG corpora)."""
    p = Path(record.path)
    if p.suffix.lower() == ".png":
        return load_png(p)
    raise IngestError(f"{record.id}: cannot load {p} (expected a PNG corpus; "
                      "convert raw/DICOM sources with the ingest subcommand first)")
