"""Rib/bone suppression: a small stride-1 convolutional network mapping a
film to its soft-tissue counterpart, trained on aligned (original,
bone-suppressed) pairs. No pooling is used, so the trained model applies at
any image size; sharpness is encouraged by an optional structural
similarity term on top of MSE.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .imgops import resize
from .rasters import GrayImage

LOSSES = ("mse", "mse_plus_structural")


@dataclass(frozen=True)
class SuppressorTrainConfig:
    input_size: int = 256
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 8
    loss: str = "mse_plus_structural"
    structural_weight: float = 0.5
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.input_size < 1:
            raise ValueError("input_size must be positive")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


class SuppressorNet(nn.Module):
    """Six stride-1 same-padding conv layers predicting an additive
    correction: output = input + correction. Geometry is never changed, and
    the residual form starts at the identity (zero-initialized last layer),
    so soft-tissue detail survives while the bone field is subtracted out.
    """

    def __init__(self):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(1, 32, 5, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(64, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 3, padding=1),
        )
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x):
        return x + self.layers(x)


@dataclass
class SuppModel:
    net: SuppressorNet
    input_size: int
    best_epoch: int = -1
    best_val_loss: float = float("nan")
    seed: int = 0


def _ssim_mean(a: torch.Tensor, b: torch.Tensor, window: int = 7) -> torch.Tensor:
    """Mean local SSIM over uniform windows, inputs in [0, 1]."""
    c1, c2 = 0.01**2, 0.03**2
    pad = window // 2
    mu_a = F.avg_pool2d(a, window, stride=1, padding=pad)
    mu_b = F.avg_pool2d(b, window, stride=1, padding=pad)
    var_a = F.avg_pool2d(a * a, window, stride=1, padding=pad) - mu_a**2
    var_b = F.avg_pool2d(b * b, window, stride=1, padding=pad) - mu_b**2
    cov = F.avg_pool2d(a * b, window, stride=1, padding=pad) - mu_a * mu_b
    ssim = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return ssim.mean()


def _loss_fn(cfg: SuppressorTrainConfig):
    mse = nn.MSELoss()
    if cfg.loss == "mse":
        return lambda out, tgt: mse(out, tgt)
    w = cfg.structural_weight
    return lambda out, tgt: mse(out, tgt) + w * (1.0 - _ssim_mean(out, tgt))


def train_suppressor(pairs, cfg: SuppressorTrainConfig) -> tuple[SuppModel, list[dict]]:
    """Train on aligned (original, suppressed) pairs; returns the checkpoint
    at minimum validation loss plus per-epoch history."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 aligned training pairs")
    for orig, target in pairs:
        if (orig.height, orig.width) != (target.height, target.width):
            raise ValueError("misaligned dimensions within a training pair")
    n_val = int(round(len(pairs) * cfg.val_fraction))
    if n_val == 0 or n_val == len(pairs):
        raise ValueError(
            f"val_fraction {cfg.val_fraction} yields an empty split for {len(pairs)} pairs"
        )
    xs = np.stack([resize(o, cfg.input_size, cfg.input_size).astype_float() for o, _ in pairs])
    ys = np.stack([resize(t, cfg.input_size, cfg.input_size).astype_float() for _, t in pairs])
    x = torch.from_numpy(xs).unsqueeze(1)
    y = torch.from_numpy(ys).unsqueeze(1)
    perm = np.random.Generator(np.random.Philox(cfg.seed)).permutation(len(pairs))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    torch.manual_seed(cfg.seed)
    net = SuppressorNet()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    loss_fn = _loss_fn(cfg)

    history: list[dict] = []
    best_state, best_loss, best_epoch = None, float("inf"), -1
    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(len(train_idx), generator=gen)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = train_idx[order[i : i + cfg.batch_size]]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
            losses.append(loss.detach().item())
        net.eval()
        with torch.no_grad():
            val_losses = [
                float(loss_fn(net(x[val_idx][i : i + cfg.batch_size]),
                              y[val_idx][i : i + cfg.batch_size]))
                for i in range(0, n_val, cfg.batch_size)
            ]
            val_loss = float(np.mean(val_losses))
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss}
        )
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    model = SuppModel(
        net=net,
        input_size=cfg.input_size,
        best_epoch=best_epoch,
        best_val_loss=best_loss,
        seed=cfg.seed,
    )
    return model, history


def suppress_bones(model: SuppModel, img: GrayImage) -> GrayImage:
    """Apply the suppressor at the image's native size; output keeps the
    input's dimensions and depth, intensity clipped to the valid range."""
    t = torch.from_numpy(img.astype_float()).unsqueeze(0).unsqueeze(0)
    model.net.eval()
    with torch.no_grad():
        out = model.net(t)[0, 0].clamp(0.0, 1.0).numpy()
    hi = img.max_value
    pixels = np.clip(np.floor(out * hi + 0.5), 0, hi).astype(img.pixels.dtype)
    return GrayImage(pixels, img.depth)


def save_supp_model(model: SuppModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), out / "weights.pt")
    manifest = {
        "kind": "rib_suppressor",
        "input_size": model.input_size,
        "best_epoch": model.best_epoch,
        "best_val_loss": model.best_val_loss,
        "seed": model.seed,
    }
    (out / "model.json").write_text(json.dumps(manifest, indent=2))


def load_supp_model(model_dir) -> SuppModel:
    d = Path(model_dir)
    manifest = json.loads((d / "model.json").read_text())
    net = SuppressorNet()
    net.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
    return SuppModel(
        net=net,
        input_size=manifest["input_size"],
        best_epoch=manifest.get("best_epoch", -1),
        best_val_loss=manifest.get("best_val_loss", float("nan")),
        seed=manifest.get("seed", 0),
    )
