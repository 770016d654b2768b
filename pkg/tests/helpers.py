"""Shared test equipment: encoders for the raw-film and DICOM formats the
ingest module reads (kept independent of the code under test), and small
manifest builders.
"""

import struct

import numpy as np

from cxrdebias.ingest import DatasetManifest, ImageRecord

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"


def encode_jsrt_raw(pixels: np.ndarray) -> bytes:
    """Big-endian 16-bit encoding, the layout read_jsrt_raw decodes."""
    return np.asarray(pixels, dtype=">u2").tobytes()


def write_dicom(path, pixels: np.ndarray, bits: int = 16, n_frames: int = 1) -> None:
    """Minimal explicit-VR little-endian grayscale DICOM writer."""
    rows, cols = pixels.shape[-2:]
    out = bytearray()
    out += b"\x00" * 128 + b"DICM"

    def elem(group, el, vr, value):
        b = struct.pack("<HH", group, el) + vr
        if vr in (b"OB", b"OW", b"SQ", b"UN", b"UT"):
            b += b"\x00\x00" + struct.pack("<I", len(value))
        else:
            b += struct.pack("<H", len(value))
        return b + value

    def text(v, pad=b" "):
        raw = v.encode()
        return raw + pad if len(raw) % 2 else raw

    meta = elem(0x0002, 0x0010, b"UI", text(EXPLICIT_VR_LE, b"\x00"))
    out += elem(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta)))
    out += meta
    out += elem(0x0008, 0x0060, b"CS", text("CR"))
    out += elem(0x0028, 0x0002, b"US", struct.pack("<H", 1))
    out += elem(0x0028, 0x0004, b"CS", text("MONOCHROME2"))
    if n_frames != 1:
        out += elem(0x0028, 0x0008, b"IS", text(str(n_frames)))
    out += elem(0x0028, 0x0010, b"US", struct.pack("<H", rows))
    out += elem(0x0028, 0x0011, b"US", struct.pack("<H", cols))
    out += elem(0x0028, 0x0100, b"US", struct.pack("<H", bits))
    out += elem(0x0028, 0x0101, b"US", struct.pack("<H", bits))
    out += elem(0x0028, 0x0102, b"US", struct.pack("<H", bits - 1))
    out += elem(0x0028, 0x0103, b"US", struct.pack("<H", 0))
    dtype = "<u2" if bits == 16 else "<u1"
    out += elem(0x7FE0, 0x0010, b"OW", np.asarray(pixels, dtype=dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def make_record(rec_id, label="non_nodule", source="PHANTOM", **kwargs) -> ImageRecord:
    defaults = dict(id=rec_id, source=source, path=f"images/{rec_id}.png", label=label,
                    patient_id=rec_id)
    defaults.update(kwargs)
    return ImageRecord(**defaults)


def make_manifest(n_nodule, n_non_nodule) -> DatasetManifest:
    records = [
        make_record(f"N{i:04d}", label="nodule", nodule_center=(10.0, 20.0),
                    nodule_size_mm=8.0)
        for i in range(n_nodule)
    ]
    records += [make_record(f"C{i:04d}", label="non_nodule") for i in range(n_non_nodule)]
    return DatasetManifest(tuple(records))
