"""Binary segmentation harness: Dice-loss training of small conv models and
confusion-count metrics in two aggregation modes.

Micro metrics sum TP/FP/FN/TN over the whole test set before scoring, so
large polyps dominate. Micro-imagewise metrics score each image first and
average the scores, so every image weighs equally regardless of polyp size.
The zero-denominator convention is fixed here once: a score is 1 when
ground truth and prediction are both empty of positives (tp = fp = fn = 0)
and 0 whenever only its denominator's positive terms vanish, so a perfect
predictor scores 1 on polyp-free images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .data import PairedDataset
from .errors import (
    EmptyDataset,
    EmptyList,
    InvalidArch,
    InvalidConfig,
    NonFiniteLoss,
    ShapeMismatch,
)
from .nnutil import ConvBlock, seeded_init_

DICE_EPS = 1e-6
PRED_THRESHOLD = 0.5


# --- counts and scores ------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class SegMetricSet:
    iou: float
    f1: float
    accuracy: float
    precision: float


def dice_loss(
    pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS
) -> torch.Tensor:
    """1 - smoothed Dice overlap between probabilities and a binary target.
    The eps smoothing makes the empty-empty case a perfect 0 loss."""
    if eps <= 0:
        raise InvalidConfig(f"eps must be > 0, got {eps}")
    if pred.shape != target.shape:
        raise ShapeMismatch(
            f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    t = target.to(pred.dtype)
    inter = (pred * t).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + t.sum() + eps)


def confusion_counts(pred: torch.Tensor, target: torch.Tensor) -> ConfusionCounts:
    """Pixel tallies with foreground as the positive class."""
    if pred.shape != target.shape:
        raise ShapeMismatch(
            f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    p = pred.to(torch.bool)
    t = target.to(torch.bool)
    return ConfusionCounts(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
        tn=int((~p & ~t).sum()),
    )


def _ratio(num: int, den: int, empty_empty: bool) -> float:
    if den == 0:
        return 1.0 if empty_empty else 0.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> SegMetricSet:
    empty_empty = c.tp == 0 and c.fp == 0 and c.fn == 0
    return SegMetricSet(
        iou=_ratio(c.tp, c.tp + c.fp + c.fn, empty_empty),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty_empty),
        accuracy=_ratio(c.tp + c.tn, c.total, True),
        precision=_ratio(c.tp, c.tp + c.fp, empty_empty),
    )


def micro_metrics(counts: Sequence[ConfusionCounts]) -> SegMetricSet:
    """Sum counts over all images, then score."""
    if not counts:
        raise EmptyList("micro_metrics needs at least one image")
    total = ConfusionCounts(0, 0, 0, 0)
    for c in counts:
        total = total + c
    return metrics_from_counts(total)


def micro_imagewise_metrics(counts: Sequence[ConfusionCounts]) -> SegMetricSet:
    """Score each image, then average the scores with equal weight."""
    if not counts:
        raise EmptyList("micro_imagewise_metrics needs at least one image")
    per = [metrics_from_counts(c) for c in counts]
    n = len(per)
    return SegMetricSet(
        iou=sum(m.iou for m in per) / n,
        f1=sum(m.f1 for m in per) / n,
        accuracy=sum(m.accuracy for m in per) / n,
        precision=sum(m.precision for m in per) / n,
    )


# --- model zoo --------------------------------------------------------------

SEG_MODELS = ("unet_small", "unet_plus_small", "fpn_small", "deeplab_like_small")
WIDTH_PRESETS = {"tiny": 8, "small": 16, "base": 32}


class _UNetSmall(nn.Module):
    def __init__(self, cin: int, w: int):
        super().__init__()
        self.e0 = ConvBlock(cin, w)
        self.d0 = ConvBlock(w, 2 * w, stride=2)
        self.e1 = ConvBlock(2 * w, 2 * w)
        self.d1 = ConvBlock(2 * w, 4 * w, stride=2)
        self.mid = ConvBlock(4 * w, 4 * w)
        self.u1 = ConvBlock(4 * w + 2 * w, 2 * w)
        self.u0 = ConvBlock(2 * w + w, w)
        self.head = nn.Conv2d(w, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s0 = self.e0(x)
        s1 = self.e1(self.d0(s0))
        h = self.mid(self.d1(s1))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.u1(torch.cat([h, s1], dim=1))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.u0(torch.cat([h, s0], dim=1))
        return self.head(h)


class _UNetPlusSmall(nn.Module):
    """Nested dense skips: each decoder node also sees every earlier node
    at its own resolution."""

    def __init__(self, cin: int, w: int):
        super().__init__()
        self.x00 = ConvBlock(cin, w)
        self.down0 = ConvBlock(w, 2 * w, stride=2)
        self.x10 = ConvBlock(2 * w, 2 * w)
        self.down1 = ConvBlock(2 * w, 4 * w, stride=2)
        self.x20 = ConvBlock(4 * w, 4 * w)
        self.x01 = ConvBlock(w + 2 * w, w)
        self.x11 = ConvBlock(2 * w + 4 * w, 2 * w)
        self.x02 = ConvBlock(w + w + 2 * w, w)
        self.head = nn.Conv2d(w, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")
        x00 = self.x00(x)
        x10 = self.x10(self.down0(x00))
        x20 = self.x20(self.down1(x10))
        x01 = self.x01(torch.cat([x00, up(x10)], dim=1))
        x11 = self.x11(torch.cat([x10, up(x20)], dim=1))
        x02 = self.x02(torch.cat([x00, x01, up(x11)], dim=1))
        return self.head(x02)


class _FPNSmall(nn.Module):
    """Encoder pyramid with 1x1 laterals merged top-down, heads summed at
    full resolution."""

    def __init__(self, cin: int, w: int):
        super().__init__()
        self.c1 = ConvBlock(cin, w)
        self.c2 = nn.Sequential(ConvBlock(w, 2 * w, stride=2), ConvBlock(2 * w, 2 * w))
        self.c3 = nn.Sequential(
            ConvBlock(2 * w, 4 * w, stride=2), ConvBlock(4 * w, 4 * w)
        )
        self.lat1 = nn.Conv2d(w, w, 1)
        self.lat2 = nn.Conv2d(2 * w, w, 1)
        self.lat3 = nn.Conv2d(4 * w, w, 1)
        self.smooth = ConvBlock(w, w)
        self.head = nn.Conv2d(w, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c1 = self.c1(x)
        c2 = self.c2(c1)
        c3 = self.c3(c2)
        p3 = self.lat3(c3)
        p2 = self.lat2(c2) + F.interpolate(p3, scale_factor=2, mode="nearest")
        p1 = self.lat1(c1) + F.interpolate(p2, scale_factor=2, mode="nearest")
        return self.head(self.smooth(p1))


class _DeepLabLikeSmall(nn.Module):
    """Strided encoder plus a dilated-convolution context head at 1/4
    resolution, bilinearly upsampled back to full size."""

    def __init__(self, cin: int, w: int):
        super().__init__()
        self.enc = nn.Sequential(
            ConvBlock(cin, w),
            ConvBlock(w, 2 * w, stride=2),
            ConvBlock(2 * w, 4 * w, stride=2),
        )
        self.branches = nn.ModuleList([
            nn.Conv2d(4 * w, w, 1),
            nn.Conv2d(4 * w, w, 3, padding=1, dilation=1),
            nn.Conv2d(4 * w, w, 3, padding=2, dilation=2),
            nn.Conv2d(4 * w, w, 3, padding=4, dilation=4),
        ])
        self.project = ConvBlock(4 * w, w)
        self.head = nn.Conv2d(w, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.enc(x)
        h = torch.cat([b(h) for b in self.branches], dim=1)
        h = self.head(self.project(h))
        return F.interpolate(
            h, scale_factor=4, mode="bilinear", align_corners=False
        )


def build_seg_model(model: str, width: str, in_channels: int) -> nn.Module:
    if model not in SEG_MODELS:
        raise InvalidArch(f"unknown segmentation model {model!r}")
    if width not in WIDTH_PRESETS:
        raise InvalidArch(f"unknown width preset {width!r}")
    w = WIDTH_PRESETS[width]
    cls = {
        "unet_small": _UNetSmall,
        "unet_plus_small": _UNetPlusSmall,
        "fpn_small": _FPNSmall,
        "deeplab_like_small": _DeepLabLikeSmall,
    }[model]
    return cls(in_channels, w)


# --- training and evaluation ------------------------------------------------

@dataclass(frozen=True)
class SegTrainConfig:
    model: str = "unet_small"
    width: str = "small"
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    loss: str = "dice"
    seed: int = 0
    val_fraction: float = 0.0  # 0 selects the best checkpoint by training loss

    def validate(self) -> None:
        if self.model not in SEG_MODELS:
            raise InvalidConfig(f"unknown segmentation model {self.model!r}")
        if self.width not in WIDTH_PRESETS:
            raise InvalidConfig(f"unknown width preset {self.width!r}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss != "dice":
            raise InvalidConfig(f"unsupported loss {self.loss!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidConfig("val_fraction must be in [0, 1)")


def train_segmenter(train: PairedDataset, cfg: SegTrainConfig) -> Checkpoint:
    """Dice-loss training with Adam; retains the epoch snapshot with the
    lowest selection loss (training loss, or validation loss when
    val_fraction > 0)."""
    cfg.validate()
    if len(train) == 0:
        raise EmptyDataset("segmentation training set is empty")

    n_val = int(round(cfg.val_fraction * len(train)))
    if n_val > 0 and len(train) - n_val >= 1:
        from .data import split_dataset

        fit_ds, val_ds = split_dataset(train, [len(train) - n_val, n_val], cfg.seed)
    else:
        fit_ds, val_ds = train, None

    images = torch.stack([s.image for s in fit_ds])
    masks = torch.stack([s.mask for s in fit_ds]).to(torch.float32).unsqueeze(1)
    net = build_seg_model(cfg.model, cfg.width, images.shape[1])
    seeded_init_(net, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)

    if val_ds is not None:
        val_images = torch.stack([s.image for s in val_ds])
        val_masks = torch.stack([s.mask for s in val_ds]).to(torch.float32).unsqueeze(1)

    n = images.shape[0]
    best_loss = math.inf
    best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=g)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            pred = torch.sigmoid(net(images[idx]))
            loss = dice_loss(pred, masks[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += value
            batches += 1
        selection = epoch_loss / batches
        if val_ds is not None:
            with torch.no_grad():
                selection = float(
                    dice_loss(torch.sigmoid(net(val_images)), val_masks)
                )
        if selection < best_loss:
            best_loss = selection
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    return Checkpoint(
        kind="segmenter",
        arch={
            "model": cfg.model,
            "width": cfg.width,
            "in_channels": int(images.shape[1]),
        },
        diffusion=None,
        step=best_epoch,
        seed=cfg.seed,
        params=best_state,
        extra={"best_epoch": best_epoch, "best_loss": best_loss,
               "selection": "val" if val_ds is not None else "train"},
    )


def seg_net_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    if ckpt.kind != "segmenter":
        raise InvalidConfig(f"not a segmenter checkpoint: kind {ckpt.kind!r}")
    net = build_seg_model(
        ckpt.arch["model"], ckpt.arch["width"], ckpt.arch["in_channels"]
    )
    net.load_state_dict(ckpt.params)
    net.eval()
    return net


class PerImageResult(NamedTuple):
    id: str
    counts: ConfusionCounts
    metrics: SegMetricSet


def evaluate_segmenter(
    ckpt: Checkpoint,
    test: PairedDataset,
    threshold: float = PRED_THRESHOLD,
    batch_size: int = 32,
) -> tuple[SegMetricSet, SegMetricSet, list[PerImageResult]]:
    """Both aggregation modes plus the per-image audit trail."""
    if len(test) == 0:
        raise EmptyDataset("segmentation test set is empty")
    net = seg_net_from_checkpoint(ckpt)
    per_image: list[PerImageResult] = []
    with torch.no_grad():
        for start in range(0, len(test), batch_size):
            batch = test.samples[start:start + batch_size]
            images = torch.stack([s.image for s in batch])
            probs = torch.sigmoid(net(images)).squeeze(1)
            preds = probs >= threshold
            for s, p in zip(batch, preds):
                c = confusion_counts(p, s.mask)
                per_image.append(PerImageResult(s.id, c, metrics_from_counts(c)))
    counts = [r.counts for r in per_image]
    return micro_metrics(counts), micro_imagewise_metrics(counts), per_image
