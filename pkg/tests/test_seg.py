from fractions import Fraction

import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

import polypdiff.seg as seg
from polypdiff.data import PairedDataset, synthetic_blob_dataset
from polypdiff.errors import (
    EmptyDataset,
    EmptyList,
    InvalidArch,
    InvalidConfig,
    ShapeMismatch,
)
from polypdiff.seg import (
    SEG_MODELS,
    WIDTH_PRESETS,
    ConfusionCounts,
    SegTrainConfig,
    build_seg_model,
    confusion_counts,
    dice_loss,
    evaluate_segmenter,
    metrics_from_counts,
    micro_imagewise_metrics,
    micro_metrics,
    seg_net_from_checkpoint,
    train_segmenter,
)


def confusion_oracle(pred, target):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, t = bool(pred[i, j]), bool(target[i, j])
            tp += p and t
            fp += p and not t
            fn += (not p) and t
            tn += (not p) and (not t)
    return ConfusionCounts(tp, fp, fn, tn)


# --- counts -----------------------------------------------------------------

def test_confusion_counts_match_oracle(rng):
    for _ in range(30):
        pred = torch.rand(8, 8, generator=rng) >= 0.5
        target = torch.rand(8, 8, generator=rng) >= 0.5
        assert confusion_counts(pred, target) == confusion_oracle(pred, target)


def test_confusion_counts_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        confusion_counts(torch.zeros(2, 2), torch.zeros(2, 3))


def test_counts_add_and_total():
    c = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
    assert c == ConfusionCounts(11, 22, 33, 44)
    assert c.total == 110


# --- score conventions ------------------------------------------------------

def test_perfect_on_empty_image_scores_one():
    m = metrics_from_counts(ConfusionCounts(0, 0, 0, 64))
    assert (m.iou, m.f1, m.precision, m.accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_false_positives_on_empty_image_score_zero():
    m = metrics_from_counts(ConfusionCounts(0, 5, 0, 59))
    assert (m.iou, m.f1, m.precision) == (0.0, 0.0, 0.0)
    assert m.accuracy == 59 / 64


def test_all_missed_foreground_scores_zero():
    # precision's own denominator is empty here, but the image is not a
    # perfect empty-empty case, so it scores 0 rather than 1
    m = metrics_from_counts(ConfusionCounts(0, 0, 5, 59))
    assert (m.iou, m.f1, m.precision) == (0.0, 0.0, 0.0)
    assert m.accuracy == 59 / 64


def test_plain_ratio_case():
    m = metrics_from_counts(ConfusionCounts(6, 2, 4, 52))
    assert m.iou == 6 / 12
    assert m.f1 == 12 / 18
    assert m.precision == 6 / 8
    assert m.accuracy == 58 / 64


def test_micro_vs_imagewise_contrast():
    # one perfectly segmented image plus one complete miss: pooled counts
    # give 1/3, equal-weight averaging gives 1/2
    a = ConfusionCounts(10, 0, 0, 90)
    b = ConfusionCounts(0, 10, 10, 80)
    assert micro_metrics([a, b]).iou == 10 / 30
    assert micro_imagewise_metrics([a, b]).iou == 0.5


def test_micro_is_order_invariant(rng):
    counts = [
        ConfusionCounts(
            int(torch.randint(0, 50, (1,), generator=rng)),
            int(torch.randint(0, 50, (1,), generator=rng)),
            int(torch.randint(0, 50, (1,), generator=rng)),
            int(torch.randint(0, 50, (1,), generator=rng)),
        )
        for _ in range(10)
    ]
    assert micro_metrics(counts) == micro_metrics(list(reversed(counts)))
    fwd = micro_imagewise_metrics(counts)
    rev = micro_imagewise_metrics(list(reversed(counts)))
    assert fwd.iou == pytest.approx(rev.iou, rel=1e-12)


def test_aggregators_reject_empty_lists():
    with pytest.raises(EmptyList):
        micro_metrics([])
    with pytest.raises(EmptyList):
        micro_imagewise_metrics([])


@given(tp=st.integers(0, 1000), fp=st.integers(0, 1000), fn=st.integers(0, 1000))
def test_f1_is_determined_by_iou(tp, fp, fn):
    m = metrics_from_counts(ConfusionCounts(tp, fp, fn, 7))
    if tp + fp + fn == 0:
        assert m.iou == 1.0 and m.f1 == 1.0
        return
    iou = Fraction(tp, tp + fp + fn)
    assert Fraction(2 * tp, 2 * tp + fp + fn) == 2 * iou / (1 + iou)
    assert m.f1 == (2 * tp) / (2 * tp + fp + fn)


# --- dice loss --------------------------------------------------------------

def test_dice_loss_perfect_match_is_zero():
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(dice_loss(t, t)) == 0.0


def test_dice_loss_empty_empty_is_zero():
    z = torch.zeros(4, 4)
    assert float(dice_loss(z, z)) == 0.0


def test_dice_loss_disjoint_is_near_one():
    pred = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    target = torch.tensor([[0, 0], [1, 1]])
    assert float(dice_loss(pred, target)) == pytest.approx(1.0, abs=1e-5)


def test_dice_loss_partial_overlap_value():
    pred = torch.ones(2, 2)
    target = torch.tensor([[1, 1], [0, 0]])
    assert float(dice_loss(pred, target)) == pytest.approx(1 - 4 / 6, abs=1e-5)


def test_dice_loss_validation():
    with pytest.raises(InvalidConfig):
        dice_loss(torch.ones(2, 2), torch.ones(2, 2), eps=0.0)
    with pytest.raises(ShapeMismatch):
        dice_loss(torch.ones(2, 2), torch.ones(3, 3))


# --- model zoo --------------------------------------------------------------

@pytest.mark.parametrize("model", SEG_MODELS)
@pytest.mark.parametrize("width", sorted(WIDTH_PRESETS))
def test_models_map_image_to_logit_grid(model, width):
    net = build_seg_model(model, width, in_channels=3)
    out = net(torch.zeros(2, 3, 16, 16))
    assert out.shape == (2, 1, 16, 16)


def test_build_seg_model_rejects_unknown():
    with pytest.raises(InvalidArch):
        build_seg_model("resnet", "small", 3)
    with pytest.raises(InvalidArch):
        build_seg_model("unet_small", "huge", 3)


def test_config_validation():
    SegTrainConfig().validate()
    bad = [
        SegTrainConfig(model="nope"),
        SegTrainConfig(width="nope"),
        SegTrainConfig(lr=0.0),
        SegTrainConfig(epochs=0),
        SegTrainConfig(batch_size=0),
        SegTrainConfig(loss="bce"),
        SegTrainConfig(val_fraction=1.0),
    ]
    for cfg in bad:
        with pytest.raises(InvalidConfig):
            cfg.validate()


# --- training ---------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_pairs():
    return synthetic_blob_dataset(6, 16, seed=4)


def test_train_is_seed_deterministic(tiny_pairs):
    cfg = SegTrainConfig(width="tiny", epochs=2, batch_size=4, seed=7)
    a = train_segmenter(tiny_pairs, cfg)
    b = train_segmenter(tiny_pairs, cfg)
    assert a.digest() == b.digest()


def test_train_records_selection(tiny_pairs):
    ckpt = train_segmenter(
        tiny_pairs, SegTrainConfig(width="tiny", epochs=3, batch_size=4, seed=7)
    )
    assert ckpt.kind == "segmenter"
    assert ckpt.step == ckpt.extra["best_epoch"]
    assert 1 <= ckpt.step <= 3
    assert ckpt.extra["selection"] == "train"
    net = seg_net_from_checkpoint(ckpt)
    assert isinstance(net, nn.Module)


def test_train_with_validation_split(tiny_pairs):
    ckpt = train_segmenter(
        tiny_pairs,
        SegTrainConfig(width="tiny", epochs=2, batch_size=4, seed=7, val_fraction=0.34),
    )
    assert ckpt.extra["selection"] == "val"


def test_train_rejects_empty_dataset():
    empty = PairedDataset(samples=[], resolution=16)
    with pytest.raises(EmptyDataset):
        train_segmenter(empty, SegTrainConfig())


def test_seg_net_from_checkpoint_rejects_other_kinds(mask_ckpt):
    with pytest.raises(InvalidConfig):
        seg_net_from_checkpoint(mask_ckpt)


# --- evaluation -------------------------------------------------------------

class _MaskEcho(nn.Module):
    """Logit +10 on true foreground, -10 elsewhere: a perfect predictor."""

    def __init__(self, masks):
        super().__init__()
        self.masks = masks
        self.calls = 0

    def forward(self, x):
        b = x.shape[0]
        out = torch.stack(
            [self.masks[self.calls + i].to(torch.float32) for i in range(b)]
        )
        self.calls += b
        return (out * 20.0 - 10.0).unsqueeze(1)


def test_evaluate_perfect_predictor(tiny_pairs, monkeypatch):
    echo = _MaskEcho([s.mask for s in tiny_pairs])
    monkeypatch.setattr(seg, "seg_net_from_checkpoint", lambda _ckpt: echo)
    micro, imagewise, per_image = evaluate_segmenter(object(), tiny_pairs)
    assert micro.iou == 1.0 and imagewise.iou == 1.0
    assert micro.f1 == 1.0 and imagewise.accuracy == 1.0
    assert [r.id for r in per_image] == [s.id for s in tiny_pairs]
    for r, s in zip(per_image, tiny_pairs):
        assert r.counts.tp == int(s.mask.sum())
        assert r.counts.fp == 0 and r.counts.fn == 0


class _ConstantLogit(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), self.value)


def test_evaluate_threshold_is_inclusive(tiny_pairs, monkeypatch):
    # logit 0 gives probability exactly 0.5, which the default threshold keeps
    monkeypatch.setattr(
        seg, "seg_net_from_checkpoint", lambda _ckpt: _ConstantLogit(0.0)
    )
    micro, _, _ = evaluate_segmenter(object(), tiny_pairs)
    total_fg = sum(int(s.mask.sum()) for s in tiny_pairs)
    total_px = sum(s.mask.numel() for s in tiny_pairs)
    assert micro.precision == total_fg / total_px  # everything predicted positive

    micro_high, _, _ = evaluate_segmenter(object(), tiny_pairs, threshold=0.6)
    assert micro_high.iou == 0.0  # nothing predicted positive


def test_evaluate_rejects_empty_dataset(tiny_pairs):
    empty = PairedDataset(samples=[], resolution=16)
    ckpt = train_segmenter(
        tiny_pairs, SegTrainConfig(width="tiny", epochs=1, batch_size=4)
    )
    with pytest.raises(EmptyDataset):
        evaluate_segmenter(ckpt, empty)


def test_overfit_reaches_high_iou():
    ds = synthetic_blob_dataset(4, 16, seed=5)
    ckpt = train_segmenter(
        ds, SegTrainConfig(width="tiny", lr=1e-3, epochs=60, batch_size=4, seed=5)
    )
    micro, _, _ = evaluate_segmenter(ckpt, ds)
    assert micro.iou > 0.8
