from dataclasses import replace

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import polypdiff.experiment as experiment
from polypdiff.data import PairedDataset, synthetic_blob_dataset
from polypdiff.denoiser import IMAGE_MODEL, TrainConfig, train_denoiser_on_tensors
from polypdiff.diffusion import DiffusionConfig
from polypdiff.errors import (
    EmptyList,
    GenerationFailed,
    InsufficientData,
    InvalidConfig,
    ShapeMismatch,
    WrongModelKind,
)
from polypdiff.experiment import (
    MixingPlan,
    generate_conditioned_images,
    generate_masks,
    run_mixing_sweep,
    run_three_way,
    select_best_checkpoint,
)
from polypdiff.latent import (
    AutoencoderArch,
    ae_from_checkpoint,
    latent_training_tensors,
    train_autoencoder,
)
from polypdiff.metrics import CheckpointRecord
from polypdiff.seg import SegMetricSet, SegTrainConfig
from polypdiff.report import SweepRow


# --- checkpoint selection ---------------------------------------------------

def test_select_lowest_fid():
    recs = [
        CheckpointRecord(100, 14.0),
        CheckpointRecord(200, 9.5),
        CheckpointRecord(300, 11.0),
    ]
    assert select_best_checkpoint(recs).checkpoint_id == 200


def test_select_tie_goes_to_earliest():
    recs = [CheckpointRecord(300, 9.5), CheckpointRecord(100, 9.5)]
    assert select_best_checkpoint(recs).checkpoint_id == 100


def test_select_rejects_empty():
    with pytest.raises(EmptyList):
        select_best_checkpoint([])


@given(st.permutations(list(range(6))))
def test_select_is_order_invariant(order):
    base = [
        CheckpointRecord(cid * 10, fid)
        for cid, fid in enumerate([14.0, 9.5, 11.0, 9.5, 20.0, 10.0])
    ]
    shuffled = [base[i] for i in order]
    assert select_best_checkpoint(shuffled) == select_best_checkpoint(base)


# --- mask generation --------------------------------------------------------

def test_generate_masks_zero_and_negative(mask_ckpt):
    assert generate_masks(mask_ckpt, 0, seed=5) == []
    with pytest.raises(InvalidConfig):
        generate_masks(mask_ckpt, -1, seed=5)


def test_generate_masks_rejects_image_model(image_ckpt):
    with pytest.raises(WrongModelKind):
        generate_masks(image_ckpt, 2, seed=5)


def test_generate_masks_requires_resolution(mask_ckpt):
    stripped = replace(mask_ckpt, extra={})
    with pytest.raises(InvalidConfig):
        generate_masks(stripped, 2, seed=5)


def test_generate_masks_deterministic_and_batch_invariant(mask_ckpt):
    a = generate_masks(mask_ckpt, 5, seed=7, reject_empty=False, batch_size=2)
    b = generate_masks(mask_ckpt, 5, seed=7, reject_empty=False, batch_size=4)
    assert len(a) == 5
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    for m in a:
        assert m.dtype == torch.uint8
        assert m.shape == (16, 16)
        assert set(m.unique().tolist()) <= {0, 1}


def test_generate_masks_slot_isolation(mask_ckpt):
    # slot i depends only on seed + i, so a shifted window reproduces a slice
    whole = generate_masks(mask_ckpt, 4, seed=20, reject_empty=False)
    tail = generate_masks(mask_ckpt, 2, seed=22, reject_empty=False)
    assert torch.equal(whole[2], tail[0])
    assert torch.equal(whole[3], tail[1])


class _AlwaysPositiveEps:
    """Denoiser stub predicting a huge positive noise everywhere, which
    drives every reconstructed sample to the all-background extreme."""

    def __call__(self, x, t, cond=None):
        return torch.full_like(x, 20.0)


def test_generate_masks_empty_rejection(mask_ckpt, monkeypatch):
    monkeypatch.setattr(
        experiment, "net_from_checkpoint", lambda _ckpt: _AlwaysPositiveEps()
    )
    with pytest.raises(GenerationFailed):
        generate_masks(mask_ckpt, 3, seed=5, reject_empty=True)
    masks = generate_masks(mask_ckpt, 3, seed=5, reject_empty=False)
    assert all(int(m.sum()) == 0 for m in masks)


# --- conditioned image generation -------------------------------------------

@pytest.fixture(scope="module")
def cond_masks():
    ds = synthetic_blob_dataset(4, 16, seed=31)
    return [s.mask for s in ds]


def test_conditioned_images_carry_their_masks(image_ckpt, cond_masks):
    out = generate_conditioned_images(image_ckpt, cond_masks, seeds=40)
    assert len(out) == 4
    for i, pair in enumerate(out):
        assert pair.id == f"synth-{i:05d}"
        assert pair.provenance == "synthetic"
        assert torch.equal(pair.mask, cond_masks[i])
        assert pair.image.shape == (1, 16, 16)
        assert float(pair.image.min()) >= -1.0
        assert float(pair.image.max()) <= 1.0


def test_conditioned_images_int_seed_expands_per_slot(image_ckpt, cond_masks):
    a = generate_conditioned_images(image_ckpt, cond_masks, seeds=40)
    b = generate_conditioned_images(
        image_ckpt, cond_masks, seeds=[40, 41, 42, 43]
    )
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))


def test_conditioned_images_batch_invariant(image_ckpt, cond_masks):
    # per-slot seeds make the noise identical, but CPU convolutions pick
    # different reduction orders for different batch shapes, so raw pixels
    # agree only to float32 working precision
    a = generate_conditioned_images(image_ckpt, cond_masks, seeds=40, batch_size=1)
    b = generate_conditioned_images(image_ckpt, cond_masks, seeds=40, batch_size=3)
    assert all(
        torch.allclose(x.image, y.image, atol=5e-5) for x, y in zip(a, b)
    )


def test_conditioned_images_distinct_across_seeds(image_ckpt, cond_masks):
    m = cond_masks[0]
    two = generate_conditioned_images(image_ckpt, [m, m], seeds=[50, 51])
    assert not torch.equal(two[0].image, two[1].image)


def test_conditioned_images_validation(image_ckpt, mask_ckpt, cond_masks):
    with pytest.raises(WrongModelKind):
        generate_conditioned_images(mask_ckpt, cond_masks, seeds=1)
    with pytest.raises(ShapeMismatch):
        generate_conditioned_images(image_ckpt, cond_masks, seeds=[1, 2])
    assert generate_conditioned_images(image_ckpt, [], seeds=[]) == []


def test_conditioned_images_latent_mode(blob12):
    ae_arch = AutoencoderArch(downsample_factor=2, latent_channels=2,
                              in_channels=1, base_channels=8)
    ae_ckpt = train_autoencoder(
        blob12, TrainConfig(total_steps=60, batch_size=4, seed=41), ae_arch
    )
    ae = ae_from_checkpoint(ae_ckpt)
    latents, conds = latent_training_tensors(ae, blob12)
    dc = DiffusionConfig(schedule_kind="cosine", T=8, conditioning="mask_concat")
    tc = TrainConfig(total_steps=30, batch_size=4, seed=42)
    ckpt = train_denoiser_on_tensors(latents, conds, IMAGE_MODEL, dc, tc)[-1]

    masks = [blob12[0].mask, blob12[1].mask]
    out = generate_conditioned_images(ckpt, masks, seeds=60, ae=ae)
    assert len(out) == 2
    for pair, m in zip(out, masks):
        assert pair.image.shape == (1, 16, 16)  # decoded back to pixel space
        assert torch.equal(pair.mask, m)
    again = generate_conditioned_images(ckpt, masks, seeds=60, ae=ae)
    assert all(torch.equal(x.image, y.image) for x, y in zip(out, again))


# --- mixing experiments -----------------------------------------------------

def _with_provenance(ds, provenance, prefix):
    samples = [
        replace(s, id=f"{prefix}-{i:05d}", provenance=provenance)
        for i, s in enumerate(ds)
    ]
    return PairedDataset(samples, ds.resolution)


@pytest.fixture(scope="module")
def mix_corpora():
    real = _with_provenance(synthetic_blob_dataset(8, 16, seed=51), "real", "r")
    synth = _with_provenance(synthetic_blob_dataset(6, 16, seed=52), "synthetic", "s")
    test = _with_provenance(synthetic_blob_dataset(4, 16, seed=53), "real", "t")
    return real, synth, test


def test_mixing_plan_validation():
    MixingPlan(10, (0, 5, 10)).validate()
    with pytest.raises(InvalidConfig):
        MixingPlan(-1, (0,)).validate()
    with pytest.raises(InvalidConfig):
        MixingPlan(10, ()).validate()
    with pytest.raises(InvalidConfig):
        MixingPlan(10, (5, 0)).validate()


def test_sweep_row_shape_and_counts(mix_corpora):
    real, synth, test = mix_corpora
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4, seed=3)
    report = run_mixing_sweep(real, synth, MixingPlan(4, (0, 2, 4)), scfg, test)
    assert [r.experiment_id for r in report.rows] == [
        "mix-r4-s0", "mix-r4-s2", "mix-r4-s4",
    ]
    assert [r.real_n for r in report.rows] == [4, 4, 4]
    assert [r.synth_n for r in report.rows] == [0, 2, 4]
    assert report.best_index is None


def test_sweep_synthetic_subsets_are_nested(mix_corpora, monkeypatch):
    real, synth, test = mix_corpora
    recorded = {}

    def fake_eval_row(eid, train_ds, _test, scfg):
        ids = tuple(s.id for s in train_ds if s.provenance == "synthetic")
        recorded[eid] = ids
        m = SegMetricSet(0.5, 2 / 3, 0.9, 0.8)
        n_real = sum(1 for s in train_ds if s.provenance == "real")
        return SweepRow(eid, scfg.model, n_real, len(ids), m, m)

    monkeypatch.setattr(experiment, "_eval_row", fake_eval_row)
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4, seed=3)
    run_mixing_sweep(real, synth, MixingPlan(4, (0, 2, 4, 6)), scfg, test)
    assert recorded["mix-r4-s0"] == ()
    assert recorded["mix-r4-s2"] == recorded["mix-r4-s4"][:2]
    assert recorded["mix-r4-s4"] == recorded["mix-r4-s6"][:4]
    assert len(set(recorded["mix-r4-s6"])) == 6


def test_sweep_parallel_matches_serial(mix_corpora):
    real, synth, test = mix_corpora
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4, seed=3)
    plan = MixingPlan(4, (0, 3))
    serial = run_mixing_sweep(real, synth, plan, scfg, test, jobs=1)
    parallel = run_mixing_sweep(real, synth, plan, scfg, test, jobs=2)
    assert serial == parallel


def test_sweep_insufficient_data(mix_corpora):
    real, synth, test = mix_corpora
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4)
    with pytest.raises(InsufficientData):
        run_mixing_sweep(real, synth, MixingPlan(100, (0,)), scfg, test)
    with pytest.raises(InsufficientData):
        run_mixing_sweep(real, synth, MixingPlan(4, (0, 100)), scfg, test)
    with pytest.raises(InvalidConfig):
        run_mixing_sweep(real, synth, MixingPlan(4, (0,)), scfg, test, jobs=0)


def test_three_way_rows_and_best(mix_corpora):
    real, synth, test = mix_corpora
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4, seed=3)
    report = run_three_way(real, synth, test, scfg)
    assert [r.experiment_id for r in report.rows] == [
        "real-only", "synthetic-only", "combined",
    ]
    assert (report.rows[0].real_n, report.rows[0].synth_n) == (len(real), 0)
    assert (report.rows[1].real_n, report.rows[1].synth_n) == (0, len(synth))
    assert (report.rows[2].real_n, report.rows[2].synth_n) == (
        len(real), len(synth)
    )
    ious = [r.imagewise.iou for r in report.rows]
    assert report.best_index == ious.index(max(ious))


def test_three_way_needs_both_corpora(mix_corpora):
    real, _, test = mix_corpora
    empty = PairedDataset(samples=[], resolution=16)
    scfg = SegTrainConfig(width="tiny", epochs=1, batch_size=4)
    with pytest.raises(InsufficientData):
        run_three_way(real, empty, test, scfg)
    with pytest.raises(InsufficientData):
        run_three_way(empty, real, test, scfg)
