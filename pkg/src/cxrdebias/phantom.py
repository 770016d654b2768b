"""Synthetic chest-film phantoms: two lung ellipses with sinusoidal rib
bands, an optional Gaussian nodule blob inside a lung, and an optional
bright corner marker acting as a label-leaking confounder.

Phantoms come with exact ground-truth lung masks, which makes classifier
debiasing, segmentation, and rib suppression all testable at desk scale:
the marker lies outside the lung field by construction, so a correct
segment-and-crop pipeline provably removes it, and the rib-free twin of any
spec (same seed, rib amplitude zero) provides aligned suppression targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError
from .ingest import DatasetManifest, ImageRecord, save_manifest
from .rasters import GrayImage, LungMask, save_mask_png, save_png

CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")
MM_PER_PIXEL = 0.5  # nominal pitch used to express blob radii in millimeters


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (x, y) in pixels
    axes: tuple[float, float]    # semi-axes (a, b) in pixels


@dataclass(frozen=True)
class Nodule:
    center: tuple[float, float]
    radius: float  # pixels; rendered as a Gaussian bump with sigma = radius / 2
    peak: float


@dataclass(frozen=True)
class Marker:
    corner: str = "top_left"
    side: int = 14
    intensity: float = 245.0
    margin: int = 2

    def __post_init__(self):
        if self.corner not in CORNERS:
            raise PhantomSpecError(f"unknown corner {self.corner!r}")


@dataclass(frozen=True)
class PhantomSpec:
    size: int
    lungs: tuple[Ellipse, Ellipse]
    rib_period: float = 18.0
    rib_amplitude: float = 25.0
    nodule: Nodule | None = None
    marker: Marker | None = None
    noise_sigma: float = 6.0
    seed: int = 0
    lung_intensity: float = 110.0
    torso: Ellipse | None = None
    torso_intensity: float = 55.0


def default_spec(size: int = 192, seed: int = 0, **overrides) -> PhantomSpec:
    """A standard two-lung phantom scaled to ``size``.

    The lung fields keep a clear mediastinal gap (wide enough that the
    default mask-repair closing cannot bridge them even after corpus
    jitter), and a darker torso ellipse fills most of the frame so global
    equalization sees a film-like histogram rather than a vacuum.
    """
    s = size / 192.0
    lungs = (
        Ellipse(center=(54.0 * s, 96.0 * s), axes=(28.0 * s, 62.0 * s)),
        Ellipse(center=(138.0 * s, 96.0 * s), axes=(28.0 * s, 62.0 * s)),
    )
    spec = PhantomSpec(
        size=size,
        lungs=lungs,
        rib_period=18.0 * s,
        torso=Ellipse(center=(96.0 * s, 100.0 * s), axes=(88.0 * s, 84.0 * s)),
        seed=seed,
    )
    return replace(spec, **overrides) if overrides else spec


def _ellipse_interior(spec: PhantomSpec, e: Ellipse, xx, yy):
    cx, cy = e.center
    a, b = e.axes
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def rasterize_lungs(spec: PhantomSpec) -> LungMask:
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    bits = _ellipse_interior(spec, spec.lungs[0], xx, yy) | _ellipse_interior(
        spec, spec.lungs[1], xx, yy
    )
    return LungMask(bits)


def marker_region(spec: PhantomSpec) -> tuple[int, int, int, int] | None:
    """Half-open (row0, col0, row1, col1) of the marker square, or None."""
    m = spec.marker
    if m is None:
        return None
    n, s, g = spec.size, m.side, m.margin
    if m.corner == "top_left":
        return (g, g, g + s, g + s)
    if m.corner == "top_right":
        return (g, n - g - s, g + s, n - g)
    if m.corner == "bottom_left":
        return (n - g - s, g, n - g, g + s)
    return (n - g - s, n - g - s, n - g, n - g)


def _validate(spec: PhantomSpec, mask: LungMask) -> None:
    if spec.nodule is not None:
        yy = np.array([[spec.nodule.center[1]]])
        xx = np.array([[spec.nodule.center[0]]])
        inside = any(
            bool(_ellipse_interior(spec, e, xx, yy)[0, 0]) for e in spec.lungs
        )
        if not inside:
            raise PhantomSpecError(
                f"nodule center {spec.nodule.center} lies outside both lung ellipses"
            )
    region = marker_region(spec)
    if region is not None:
        r0, c0, r1, c1 = region
        if r0 < 0 or c0 < 0 or r1 > spec.size or c1 > spec.size:
            raise PhantomSpecError("marker square does not fit in the image")
        if mask.bits[r0:r1, c0:c1].any():
            raise PhantomSpecError("marker square overlaps the lung field")


def _subtlety_for_peak(peak: float) -> str:
    if peak >= 100:
        return "obvious"
    if peak >= 85:
        return "relatively_obvious"
    if peak >= 70:
        return "subtle"
    if peak >= 55:
        return "very_subtle"
    return "extremely_subtle"


def generate_phantom(
    spec: PhantomSpec, record_id: str | None = None
) -> tuple[GrayImage, LungMask, ImageRecord]:
    """Render one phantom. Deterministic for a fixed spec (seed included)."""
    mask = rasterize_lungs(spec)
    _validate(spec, mask)
    rng = np.random.Generator(np.random.Philox(spec.seed))

    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    img = np.zeros((spec.size, spec.size))
    if spec.torso is not None:
        img[_ellipse_interior(spec, spec.torso, xx, yy)] = spec.torso_intensity
    img[mask.bits] = spec.lung_intensity

    # rib phase is always drawn so the rib-free twin consumes the same stream
    phase = rng.uniform(0.0, 2.0 * math.pi)
    if spec.rib_amplitude != 0.0:
        bands = spec.rib_amplitude * np.sin(2.0 * math.pi * yy / spec.rib_period + phase)
        img[mask.bits] += bands[mask.bits]

    if spec.nodule is not None:
        cx, cy = spec.nodule.center
        sigma = spec.nodule.radius / 2.0
        bump = spec.nodule.peak * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2)
        )
        img[mask.bits] += bump[mask.bits]

    region = marker_region(spec)
    if region is not None:
        r0, c0, r1, c1 = region
        img[r0:r1, c0:c1] = spec.marker.intensity

    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, img.shape)

    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    rid = record_id or f"PH{spec.seed:08d}"
    record = ImageRecord(
        id=rid,
        source="PHANTOM",
        path="",
        label="nodule" if spec.nodule is not None else "non_nodule",
        subtlety=_subtlety_for_peak(spec.nodule.peak) if spec.nodule else None,
        nodule_center=spec.nodule.center if spec.nodule else None,
        nodule_size_mm=(
            round(spec.nodule.radius * MM_PER_PIXEL, 1) if spec.nodule else None
        ),
        patient_id=rid,
    )
    return GrayImage(pixels, 8), mask, record


def _sample_nodule(rng: np.random.Generator, lung: Ellipse, size: int) -> Nodule:
    cx, cy = lung.center
    a, b = lung.axes
    # keep the bump core well inside the ellipse
    theta = rng.uniform(0.0, 2.0 * math.pi)
    rho = math.sqrt(rng.uniform(0.0, 1.0)) * 0.6
    center = (cx + rho * a * math.cos(theta), cy + rho * b * math.sin(theta))
    radius = rng.uniform(10.0, 16.0) * size / 192.0
    peak = rng.uniform(70.0, 110.0)
    return Nodule(center=center, radius=radius, peak=peak)


def _jittered_spec(rng: np.random.Generator, size: int, seed: int) -> PhantomSpec:
    s = size / 192.0
    base = default_spec(size=size, seed=seed)
    lungs = tuple(
        Ellipse(
            center=(
                e.center[0] + rng.uniform(-4.0, 4.0) * s,
                e.center[1] + rng.uniform(-4.0, 4.0) * s,
            ),
            axes=(
                e.axes[0] * rng.uniform(0.9, 1.05),
                e.axes[1] * rng.uniform(0.9, 1.05),
            ),
        )
        for e in base.lungs
    )
    # per-image exposure variation: the brightness/contrast spread that
    # equalization exists to normalize, and which keeps the global intensity
    # map from leaking tiny histogram differences (e.g. marker pixels)
    return replace(
        base,
        lungs=lungs,
        rib_period=rng.uniform(15.0, 22.0) * s,
        rib_amplitude=rng.uniform(20.0, 30.0),
        lung_intensity=rng.uniform(100.0, 124.0),
        torso_intensity=rng.uniform(45.0, 66.0),
        noise_sigma=rng.uniform(5.0, 7.0),
    )


def generate_corpus(
    n_per_class: int,
    confounder_policy: str,
    seed: int,
    out_dir,
    size: int = 192,
    emit_ribfree: bool = False,
) -> DatasetManifest:
    """Write a labeled phantom corpus: images/, masks/, manifest.csv.

    ``correlated`` puts the corner marker on every nodule image and on no
    non_nodule image; ``anticorrelated`` is the reverse; ``absent`` renders
    no markers. With ``emit_ribfree`` a ribfree/ twin of every image is
    written for suppressor training.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if confounder_policy not in ("correlated", "anticorrelated", "absent"):
        raise ValueError(f"unknown confounder policy {confounder_policy!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if emit_ribfree:
        (out / "ribfree").mkdir(parents=True, exist_ok=True)

    master = np.random.Generator(np.random.Philox(seed))
    records = []
    for i in range(2 * n_per_class):
        has_nodule = i % 2 == 0
        child_seed = int(master.integers(0, 2**63 - 1))
        spec = _jittered_spec(master, size, child_seed)
        if has_nodule:
            lung = spec.lungs[int(master.integers(0, 2))]
            spec = replace(spec, nodule=_sample_nodule(master, lung, size))
        marked = (
            confounder_policy == "correlated"
            and has_nodule
            or confounder_policy == "anticorrelated"
            and not has_nodule
        )
        if marked:
            corner = CORNERS[int(master.integers(0, len(CORNERS)))]
            spec = replace(
                spec, marker=Marker(corner=corner, side=max(8, round(14 * size / 192)))
            )
        rid = f"PH{i:05d}"
        img, mask, record = generate_phantom(spec, record_id=rid)
        save_png(img, out / "images" / f"{rid}.png")
        save_mask_png(mask, out / "masks" / f"{rid}.png")
        if emit_ribfree:
            ribfree_img, _, _ = generate_phantom(
                replace(spec, rib_amplitude=0.0), record_id=rid
            )
            save_png(ribfree_img, out / "ribfree" / f"{rid}.png")
        records.append(replace(record, path=f"images/{rid}.png"))

    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, out / "manifest.csv")
    return manifest
