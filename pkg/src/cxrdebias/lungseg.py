"""Lung-field segmentation: a deep residual U-Net trained on image/mask
pairs, plus the classical mask post-processing used on its predictions:
morphological closing, parameterized interior hole filling, contour-count
quality control, and the Dice overlap metric.

Mask repair fills only interior background components (never anything
touching the image border) whose area is strictly below
``min_hole_area_fraction`` of the image area, after closing with a square
kernel; both parameters sit in MaskRepairParams with defaults of kernel 8
and 1/16.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .imgops import resize
from .rasters import GrayImage, LungMask

QC_OK = "ok"
QC_TOO_FEW_CONTOURS = "too_few_contours"
QC_POOR_SINGLE_LUNG = "poor_single_lung"

DEFAULT_QC_SECONDARY_RATIO = 0.25


@dataclass(frozen=True)
class MaskRepairParams:
    closing_kernel: int = 8
    min_hole_area_fraction: float = 1.0 / 16.0

    def __post_init__(self):
        if self.closing_kernel < 1:
            raise ValueError("closing_kernel must be >= 1")
        if not 0.0 < self.min_hole_area_fraction < 1.0:
            raise ValueError("min_hole_area_fraction must be in (0, 1)")


@dataclass(frozen=True)
class QCResult:
    accepted: bool
    reason: str

    def __post_init__(self):
        if self.accepted != (self.reason == QC_OK):
            raise ValueError("accepted must hold exactly when reason is 'ok'")


def repair_mask(mask: LungMask, params: MaskRepairParams = MaskRepairParams()) -> LungMask:
    """Binary closing with a square kernel, then fill small interior holes.

    A background connected component is filled when it does not touch the
    image border and its area is strictly less than
    min_hole_area_fraction * width * height.
    """
    k = params.closing_kernel
    fg = mask.bits
    padded = np.pad(fg, k)  # emulate closing on the infinite background plane
    closed = ndimage.binary_closing(padded, structure=np.ones((k, k), bool))[k:-k, k:-k]

    background = ~closed
    labels, _ = ndimage.label(background)  # 4-connectivity for background
    border = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    areas = np.bincount(labels.ravel())
    threshold = params.min_hole_area_fraction * mask.width * mask.height
    fill = np.zeros(len(areas), dtype=bool)
    fill[1:] = areas[1:] < threshold
    fill[border] = False
    return LungMask(closed | fill[labels])


def qc_mask(
    mask: LungMask, min_secondary_ratio: float = DEFAULT_QC_SECONDARY_RATIO
) -> QCResult:
    """Reject masks with fewer than two foreground contours, or whose
    second-largest contour is too small relative to the largest."""
    labels, count = ndimage.label(mask.bits, structure=np.ones((3, 3), bool))
    if count < 2:
        return QCResult(False, QC_TOO_FEW_CONTOURS)
    areas = np.sort(np.bincount(labels.ravel())[1:])[::-1]
    if areas[1] / areas[0] < min_secondary_ratio:
        return QCResult(False, QC_POOR_SINGLE_LUNG)
    return QCResult(True, QC_OK)


def dice(a: LungMask, b: LungMask) -> float:
    """2|A∩B| / (|A|+|B|); the empty-vs-empty case is defined as 1."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    total = a.area + b.area
    if total == 0:
        return 1.0
    inter = int((a.bits & b.bits).sum())
    return 2.0 * inter / total


# ---------------------------------------------------------------------------
# residual U-Net


@dataclass(frozen=True)
class SegTrainConfig:
    input_size: int = 512
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 4
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        factor = 1 << len(self.widths)  # encoder downsamples + bridge
        if self.input_size % factor != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by {factor} "
                f"for {len(self.widths)} levels"
            )
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


class _ResidualUnit(nn.Module):
    """Pre-activation residual unit: (BN-ReLU-conv3) x2 with projection
    shortcut when shape changes."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            nn.ReLU(inplace=True),
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
        )
        if cin != cout or stride != 1:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.body(x) + self.shortcut(x)


class ResidualUNet(nn.Module):
    def __init__(self, widths: tuple[int, ...] = (16, 32, 64, 128, 256)):
        super().__init__()
        self.stem = nn.Conv2d(1, widths[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.encoder.append(_ResidualUnit(prev, w, stride=1 if i == 0 else 2))
            prev = w
        self.bridge = _ResidualUnit(prev, prev * 2, stride=2)
        self.decoder = nn.ModuleList()
        cur = prev * 2
        for w in reversed(widths):
            self.decoder.append(_ResidualUnit(cur + w, w, stride=1))
            cur = w
        self.head = nn.Conv2d(widths[0], 1, 1)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for unit in self.encoder:
            x = unit(x)
            skips.append(x)
        x = self.bridge(x)
        for unit, skip in zip(self.decoder, reversed(skips)):
            x = self.upsample(x)
            x = unit(torch.cat([x, skip], dim=1))
        return self.head(x)


@dataclass
class SegModel:
    net: ResidualUNet
    input_size: int
    widths: tuple[int, ...]
    threshold: float = 0.5
    best_epoch: int = -1
    best_val_dice: float = float("nan")
    seed: int = 0


def _soft_dice_loss(logits, targets, eps: float = 1e-6):
    probs = torch.sigmoid(logits)
    inter = (probs * targets).sum(dim=(1, 2, 3))
    denom = probs.sum(dim=(1, 2, 3)) + targets.sum(dim=(1, 2, 3))
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def _resize_mask_nearest(bits: np.ndarray, h: int, w: int) -> np.ndarray:
    if bits.shape == (h, w):
        return bits.copy()
    src_h, src_w = bits.shape
    ys = np.zeros(h, dtype=int) if h == 1 else np.rint(np.linspace(0, src_h - 1, h)).astype(int)
    xs = np.zeros(w, dtype=int) if w == 1 else np.rint(np.linspace(0, src_w - 1, w)).astype(int)
    return bits[np.ix_(ys, xs)]


def _pairs_to_tensors(
    pairs, size: int
) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, masks = [], []
    for img, mask in pairs:
        if (img.height, img.width) != (mask.height, mask.width):
            raise ValueError("image/mask dimensions differ within a training pair")
        imgs.append(resize(img, size, size).astype_float())
        masks.append(_resize_mask_nearest(mask.bits, size, size).astype(np.float32))
    x = torch.from_numpy(np.stack(imgs)).unsqueeze(1)
    y = torch.from_numpy(np.stack(masks)).unsqueeze(1)
    return x, y


def train_segmenter(pairs, cfg: SegTrainConfig) -> tuple[SegModel, list[dict]]:
    """Train on (image, mask) pairs; returns the checkpoint with maximum
    validation Dice and the per-epoch history."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 image/mask pairs")
    n_val = int(round(len(pairs) * cfg.val_fraction))
    if n_val == 0 or n_val == len(pairs):
        raise ValueError(
            f"val_fraction {cfg.val_fraction} yields an empty split for {len(pairs)} pairs"
        )
    x, y = _pairs_to_tensors(pairs, cfg.input_size)
    perm = np.random.Generator(np.random.Philox(cfg.seed)).permutation(len(pairs))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]

    torch.manual_seed(cfg.seed)
    net = ResidualUNet(cfg.widths)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)

    history: list[dict] = []
    best_state, best_dice, best_epoch = None, -1.0, -1
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(len(x_train), generator=gen)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            loss = _soft_dice_loss(net(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()
            losses.append(loss.detach().item())
        net.eval()
        with torch.no_grad():
            dices = []
            for i in range(0, len(x_val), cfg.batch_size):
                pred = torch.sigmoid(net(x_val[i : i + cfg.batch_size])) > 0.5
                truth = y_val[i : i + cfg.batch_size] > 0.5
                inter = (pred & truth).sum(dim=(1, 2, 3)).double()
                denom = pred.sum(dim=(1, 2, 3)) + truth.sum(dim=(1, 2, 3))
                d = torch.where(denom > 0, 2.0 * inter / denom, torch.ones_like(inter))
                dices.extend(d.tolist())
            val_dice = float(np.mean(dices))
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice}
        )
        if val_dice > best_dice:
            best_dice, best_epoch = val_dice, epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    model = SegModel(
        net=net,
        input_size=cfg.input_size,
        widths=cfg.widths,
        best_epoch=best_epoch,
        best_val_dice=best_dice,
        seed=cfg.seed,
    )
    return model, history


def predict_mask(model: SegModel, img: GrayImage) -> LungMask:
    """Segment at the model's training size, threshold the probability map
    at 0.5, and return a mask at the source dimensions."""
    x = resize(img, model.input_size, model.input_size).astype_float()
    t = torch.from_numpy(x).unsqueeze(0).unsqueeze(0)
    model.net.eval()
    with torch.no_grad():
        prob = torch.sigmoid(model.net(t))[0, 0].numpy()
    bits = prob > model.threshold
    return LungMask(_resize_mask_nearest(bits, img.height, img.width))


def save_seg_model(model: SegModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), out / "weights.pt")
    manifest = {
        "kind": "lung_segmenter",
        "input_size": model.input_size,
        "widths": list(model.widths),
        "threshold": model.threshold,
        "best_epoch": model.best_epoch,
        "best_val_dice": model.best_val_dice,
        "seed": model.seed,
    }
    (out / "model.json").write_text(json.dumps(manifest, indent=2))


def load_seg_model(model_dir) -> SegModel:
    d = Path(model_dir)
    manifest = json.loads((d / "model.json").read_text())
    net = ResidualUNet(tuple(manifest["widths"]))
    net.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
    return SegModel(
        net=net,
        input_size=manifest["input_size"],
        widths=tuple(manifest["widths"]),
        threshold=manifest.get("threshold", 0.5),
        best_epoch=manifest.get("best_epoch", -1),
        best_val_dice=manifest.get("best_val_dice", float("nan")),
        seed=manifest.get("seed", 0),
    )
