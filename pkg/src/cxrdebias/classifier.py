"""Binary nodule classifier: a 16-layer (or deeper) convolutional backbone
with a small sigmoid head, trained in two phases: a head-training phase at
a higher learning rate, then a short fine-tuning phase that unfreezes the
top backbone stage at a strictly lower rate. The returned checkpoint is the
one with minimum validation loss across both phases.

Backbone weights: with ``pretrained="auto"`` the natural-image pretrained
weights are used when available in the local torchvision cache; otherwise
the backbone falls back to seeded random initialization with a warning
(this sandbox cannot download weight files). Stages that a phase keeps
frozen are computed once and cached, which keeps CPU training tractable;
for backbones with batch norm the frozen part runs in eval mode.
"""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imgops import letterbox
from .rasters import GrayImage

log = logging.getLogger(__name__)

BACKBONES = ("vgg16", "vgg19", "densenet121", "resnet50")
POOLINGS = ("avg", "max")
SCOPES = ("head_only", "last_stage", "all")

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class HeadSpec:
    """Output head: global pooling -> dense hidden -> dropout -> 1 sigmoid unit."""

    pooling: str = "avg"
    hidden: int = 256
    dropout: float = 0.5

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class FreezePolicy:
    """Trainable scope per phase: head_only, last_stage (plus head), or all."""

    phase1: str = "head_only"
    phase2: str = "last_stage"

    def __post_init__(self):
        for scope in (self.phase1, self.phase2):
            if scope not in SCOPES:
                raise ValueError(f"freeze scope must be one of {SCOPES}")


@dataclass(frozen=True)
class ClassifierConfig:
    backbone: str = "vgg16"
    head: HeadSpec = HeadSpec()
    freeze: FreezePolicy = FreezePolicy()
    pretrained: str = "auto"  # "auto" | "never"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.pretrained not in ("auto", "never"):
            raise ValueError("pretrained must be 'auto' or 'never'")


@dataclass(frozen=True)
class PhaseSpec:
    learning_rate: float
    epochs: int


@dataclass(frozen=True)
class TrainSchedule:
    """Two-phase schedule with binary cross-entropy loss and checkpointing
    at the minimum validation loss."""

    phase1: PhaseSpec = PhaseSpec(5e-4, 50)
    phase2: PhaseSpec = PhaseSpec(1e-5, 10)
    batch_size: int = 32
    input_size: int = 224
    seed: int = 0

    def __post_init__(self):
        for spec in (self.phase1, self.phase2):
            if spec.learning_rate <= 0:
                raise ValueError("phase learning rates must be positive")
            if spec.epochs < 1:
                raise ValueError("phase epochs must be >= 1")
        if self.phase2.learning_rate >= self.phase1.learning_rate:
            raise ValueError("phase-2 learning rate must be strictly lower than phase 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.input_size < 32:
            raise ValueError("input_size must be >= 32 for the supported backbones")


class _Head(nn.Module):
    def __init__(self, in_channels: int, spec: HeadSpec):
        super().__init__()
        pool = nn.AdaptiveAvgPool2d(1) if spec.pooling == "avg" else nn.AdaptiveMaxPool2d(1)
        self.net = nn.Sequential(
            pool,
            nn.Flatten(),
            nn.Linear(in_channels, spec.hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(spec.dropout),
            nn.Linear(spec.hidden, 1),
        )

    def forward(self, x):
        return self.net(x)


def _torchvision_weights(name: str):
    from torchvision import models

    return {
        "vgg16": models.VGG16_Weights.IMAGENET1K_V1,
        "vgg19": models.VGG19_Weights.IMAGENET1K_V1,
        "densenet121": models.DenseNet121_Weights.IMAGENET1K_V1,
        "resnet50": models.ResNet50_Weights.IMAGENET1K_V1,
    }[name]


def _split_backbone(name: str, weights) -> tuple[nn.Module, nn.Module]:
    """Return (trunk, last_stage): the final convolutional stage is the part
    unfrozen by the fine-tuning phase."""
    from torchvision import models

    if name == "vgg16":
        feats = models.vgg16(weights=weights).features
        return nn.Sequential(*feats[:24]), nn.Sequential(*feats[24:])
    if name == "vgg19":
        feats = models.vgg19(weights=weights).features
        return nn.Sequential(*feats[:27]), nn.Sequential(*feats[27:])
    if name == "resnet50":
        m = models.resnet50(weights=weights)
        trunk = nn.Sequential(m.conv1, m.bn1, m.relu, m.maxpool, m.layer1, m.layer2, m.layer3)
        return trunk, m.layer4
    if name == "densenet121":
        f = models.densenet121(weights=weights).features
        trunk = nn.Sequential(*list(f.children())[:-2])
        last = nn.Sequential(*list(f.children())[-2:], nn.ReLU(inplace=True))
        return trunk, last
    raise ValueError(f"unknown backbone {name!r}")


@dataclass
class ClsModel:
    cfg: ClassifierConfig
    trunk: nn.Module
    last_stage: nn.Module
    head: _Head
    feature_channels: int
    pretrained_loaded: bool
    input_size: int | None = None
    best_epoch: int = -1
    best_val_loss: float = float("nan")
    history: list = field(default_factory=list)

    def backbone_modules(self) -> tuple[nn.Module, nn.Module]:
        return self.trunk, self.last_stage

    def eval(self):
        self.trunk.eval()
        self.last_stage.eval()
        self.head.eval()
        return self


def build_classifier(cfg: ClassifierConfig, seed: int = 0) -> ClsModel:
    """Construct the backbone + head. Seeded, so two builds with identical
    cfg and seed have identical initial weights."""
    torch.manual_seed(seed)
    weights = None
    loaded = False
    if cfg.pretrained == "auto":
        try:
            weights = _torchvision_weights(cfg.backbone)
            trunk, last = _split_backbone(cfg.backbone, weights)
            loaded = True
        except Exception as exc:  # no cache and no network: fall back to random
            warnings.warn(
                f"pretrained weights for {cfg.backbone} unavailable ({exc}); "
                "falling back to seeded random initialization",
                RuntimeWarning,
                stacklevel=2,
            )
            torch.manual_seed(seed)
            trunk, last = _split_backbone(cfg.backbone, None)
    else:
        trunk, last = _split_backbone(cfg.backbone, None)
    trunk.eval()
    last.eval()
    with torch.no_grad():
        channels = int(last(trunk(torch.zeros(1, 3, 64, 64))).shape[1])
    head = _Head(channels, cfg.head)
    return ClsModel(
        cfg=cfg,
        trunk=trunk,
        last_stage=last,
        head=head,
        feature_channels=channels,
        pretrained_loaded=loaded,
    )


def _to_tensor(img: GrayImage, input_size: int | None) -> torch.Tensor:
    if input_size is not None and (img.width, img.height) != (input_size, input_size):
        img = letterbox(img, input_size)
    x = torch.from_numpy(img.astype_float())
    x = x.unsqueeze(0).repeat(3, 1, 1)
    mean = torch.tensor(_IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(_IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def _stack_items(items, input_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.stack([_to_tensor(img, input_size) for img, _ in items])
    ys = torch.tensor([float(label) for _, label in items])
    return xs, ys


def _check_both_classes(items, name: str) -> None:
    labels = {int(label) for _, label in items}
    if labels != {0, 1}:
        raise ValueError(f"{name} split must contain both classes, got labels {sorted(labels)}")


def _forward_cached(stages: list[nn.Module], x: torch.Tensor, batch: int) -> torch.Tensor:
    """No-grad forward through frozen stages, in eval mode, batched."""
    outs = []
    with torch.no_grad():
        for module in stages:
            module.eval()
        for i in range(0, len(x), batch):
            h = x[i : i + batch]
            for module in stages:
                h = module(h)
            outs.append(h)
    return torch.cat(outs)


def train_fold(
    model: ClsModel, train, val, sched: TrainSchedule
) -> tuple[ClsModel, list[dict]]:
    """Two-phase training; returns the model loaded with the weights of the
    epoch with minimum validation loss, plus the full epoch history."""
    if not train or not val:
        raise ValueError("train and val must be non-empty")
    _check_both_classes(train, "train")
    _check_both_classes(val, "val")

    x_train, y_train = _stack_items(train, sched.input_size)
    x_val, y_val = _stack_items(val, sched.input_size)
    torch.manual_seed(sched.seed)
    gen = torch.Generator().manual_seed(sched.seed)
    loss_fn = nn.BCEWithLogitsLoss()

    history: list[dict] = []
    best = {"loss": float("inf"), "epoch": -1, "state": None}
    global_epoch = 0

    # trunk outputs are reused by every scope except "all"
    trunk_train = trunk_val = None

    def trunk_features():
        nonlocal trunk_train, trunk_val
        if trunk_train is None:
            trunk_train = _forward_cached([model.trunk], x_train, sched.batch_size)
            trunk_val = _forward_cached([model.trunk], x_val, sched.batch_size)
        return trunk_train, trunk_val

    def snapshot():
        return {
            "trunk": copy.deepcopy(model.trunk.state_dict()),
            "last": copy.deepcopy(model.last_stage.state_dict()),
            "head": copy.deepcopy(model.head.state_dict()),
        }

    for phase_idx, (spec, scope) in enumerate(
        [(sched.phase1, model.cfg.freeze.phase1), (sched.phase2, model.cfg.freeze.phase2)],
        start=1,
    ):
        if scope == "head_only":
            tr_in, va_in = trunk_features()
            tr_in = _forward_cached([model.last_stage], tr_in, sched.batch_size)
            va_in = _forward_cached([model.last_stage], va_in, sched.batch_size)
            live = [model.head]
        elif scope == "last_stage":
            tr_in, va_in = trunk_features()
            live = [model.last_stage, model.head]
        else:  # all
            tr_in, va_in = x_train, x_val
            live = [model.trunk, model.last_stage, model.head]

        def forward(batch, training: bool):
            h = batch
            for module in live:
                module.train(training)
                h = module(h)
            return h

        params = [p for module in live for p in module.parameters()]
        opt = torch.optim.Adam(params, lr=spec.learning_rate)

        for epoch in range(spec.epochs):
            order = torch.randperm(len(tr_in), generator=gen)
            losses = []
            for i in range(0, len(order), sched.batch_size):
                idx = order[i : i + sched.batch_size]
                opt.zero_grad()
                logits = forward(tr_in[idx], training=True).squeeze(1)
                loss = loss_fn(logits, y_train[idx])
                loss.backward()
                opt.step()
                losses.append(loss.detach().item())
            with torch.no_grad():
                val_logits = torch.cat(
                    [
                        forward(va_in[i : i + sched.batch_size], training=False)
                        for i in range(0, len(va_in), sched.batch_size)
                    ]
                ).squeeze(1)
                val_loss = float(loss_fn(val_logits, y_val))
            history.append(
                {
                    "phase": phase_idx,
                    "epoch": global_epoch,
                    "learning_rate": spec.learning_rate,
                    "train_loss": float(np.mean(losses)),
                    "val_loss": val_loss,
                }
            )
            if val_loss < best["loss"]:
                best.update(loss=val_loss, epoch=global_epoch, state=snapshot())
            global_epoch += 1

        # phase boundary: weights may have changed, trunk cache only stays
        # valid when the trunk itself was frozen
        if scope == "all":
            trunk_train = trunk_val = None

    model.trunk.load_state_dict(best["state"]["trunk"])
    model.last_stage.load_state_dict(best["state"]["last"])
    model.head.load_state_dict(best["state"]["head"])
    model.input_size = sched.input_size
    model.best_epoch = best["epoch"]
    model.best_val_loss = best["loss"]
    model.history = history
    return model, history


def predict_nodule_prob(model: ClsModel, img: GrayImage) -> float:
    """Nodule-class probability in [0, 1]; deterministic in inference mode."""
    return float(predict_batch(model, [img])[0])


def predict_batch(model: ClsModel, imgs) -> np.ndarray:
    model.eval()
    xs = torch.stack([_to_tensor(img, model.input_size) for img in imgs])
    probs = []
    with torch.no_grad():
        for i in range(0, len(xs), 32):
            h = model.trunk(xs[i : i + 32])
            h = model.last_stage(h)
            logits = model.head(h).squeeze(1)
            probs.append(torch.sigmoid(logits))
    return torch.cat(probs).numpy()


def save_cls_model(model: ClsModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "trunk": model.trunk.state_dict(),
            "last": model.last_stage.state_dict(),
            "head": model.head.state_dict(),
        },
        out / "weights.pt",
    )
    manifest = {
        "kind": "nodule_classifier",
        "backbone": model.cfg.backbone,
        "head": {
            "pooling": model.cfg.head.pooling,
            "hidden": model.cfg.head.hidden,
            "dropout": model.cfg.head.dropout,
        },
        "freeze": {"phase1": model.cfg.freeze.phase1, "phase2": model.cfg.freeze.phase2},
        "pretrained": model.cfg.pretrained,
        "pretrained_loaded": model.pretrained_loaded,
        "input_size": model.input_size,
        "best_epoch": model.best_epoch,
        "best_val_loss": model.best_val_loss,
    }
    (out / "model.json").write_text(json.dumps(manifest, indent=2))


def load_cls_model(model_dir) -> ClsModel:
    d = Path(model_dir)
    manifest = json.loads((d / "model.json").read_text())
    cfg = ClassifierConfig(
        backbone=manifest["backbone"],
        head=HeadSpec(**manifest["head"]),
        freeze=FreezePolicy(**manifest["freeze"]),
        pretrained="never",
    )
    model = build_classifier(cfg)
    state = torch.load(d / "weights.pt", weights_only=True)
    model.trunk.load_state_dict(state["trunk"])
    model.last_stage.load_state_dict(state["last"])
    model.head.load_state_dict(state["head"])
    model.input_size = manifest.get("input_size")
    model.best_epoch = manifest.get("best_epoch", -1)
    model.best_val_loss = manifest.get("best_val_loss", float("nan"))
    return model
