import math

import pytest
import torch

from polypdiff.data import synthetic_blob_dataset
from polypdiff.denoiser import (
    IMAGE_MODEL,
    MASK_MODEL,
    DenoiserArch,
    TrainConfig,
    init_denoiser,
    net_from_checkpoint,
    schedule_from_checkpoint,
    timestep_embedding,
    train_denoiser,
    train_denoiser_on_tensors,
)
from polypdiff.diffusion import DiffusionConfig
from polypdiff.errors import (
    EmptyDataset,
    InvalidConfig,
    InvalidDim,
    MissingCondition,
    ShapeMismatch,
)


def embedding_oracle(t, dim):
    """The sinusoidal formula evaluated with plain math."""
    half = dim // 2
    out = []
    for i in range(half):
        out.append(math.sin(t * 10000 ** (-2 * i / dim)))
    for i in range(half):
        out.append(math.cos(t * 10000 ** (-2 * i / dim)))
    return out


def test_timestep_embedding_matches_formula():
    for t in (0, 1, 17, 999):
        got = timestep_embedding(torch.tensor(t), 8)
        want = torch.tensor(embedding_oracle(t, 8))
        assert torch.allclose(got, want.to(got.dtype), atol=1e-6)


def test_timestep_embedding_t0_halves():
    emb = timestep_embedding(torch.tensor(0), 16)
    assert torch.equal(emb[:8], torch.zeros(8))
    assert torch.equal(emb[8:], torch.ones(8))


def test_timestep_embedding_bounded():
    emb = timestep_embedding(torch.tensor(12345), 32)
    assert float(emb.abs().max()) <= 1.0


def test_timestep_embedding_batch_shape():
    emb = timestep_embedding(torch.tensor([1, 2, 3]), 8)
    assert emb.shape == (3, 8)


def test_timestep_embedding_odd_dim_rejected():
    with pytest.raises(InvalidDim):
        timestep_embedding(torch.tensor(1), 7)


def test_init_is_seed_deterministic(tiny_arch):
    a = init_denoiser(tiny_arch, seed=3)
    b = init_denoiser(tiny_arch, seed=3)
    c = init_denoiser(tiny_arch, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert any(
        not torch.equal(pa, pc)
        for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_forward_preserves_shape(tiny_arch, rng):
    net = init_denoiser(tiny_arch, seed=0)
    x = torch.randn(2, 1, 16, 16, generator=rng)
    out = net(x, torch.tensor([3, 4]))
    assert out.shape == x.shape
    assert torch.isfinite(out).all()


def test_forward_rejects_bad_spatial_size(tiny_arch, rng):
    net = init_denoiser(tiny_arch, seed=0)
    # depth 2 needs divisibility by 4
    with pytest.raises(ShapeMismatch):
        net(torch.randn(1, 1, 6, 6, generator=rng), torch.tensor([1]))


def test_condition_channel_contract(rng):
    cond_arch = DenoiserArch(
        base_channels=8, depth=2, in_channels=1, cond_channels=1, embed_dim=32
    )
    net = init_denoiser(cond_arch, seed=0)
    x = torch.randn(1, 1, 16, 16, generator=rng)
    cond = torch.zeros(1, 1, 16, 16)
    assert net(x, torch.tensor([1]), cond).shape == x.shape
    with pytest.raises(MissingCondition):
        net(x, torch.tensor([1]))
    uncond = init_denoiser(
        DenoiserArch(base_channels=8, depth=2, in_channels=1, cond_channels=0,
                     embed_dim=32),
        seed=0,
    )
    with pytest.raises(ShapeMismatch):
        uncond(x, torch.tensor([1]), cond)


def test_train_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(total_steps=0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(InvalidConfig):
        TrainConfig(optimizer="sgd").validate()


def test_train_rejects_empty_dataset(tiny_arch):
    from polypdiff.data import PairedDataset

    empty = PairedDataset([], 16)
    with pytest.raises(EmptyDataset):
        train_denoiser(
            empty, MASK_MODEL, DiffusionConfig(T=4), TrainConfig(total_steps=1)
        )


def test_train_is_seed_deterministic(blob12, tiny_arch):
    dc = DiffusionConfig(schedule_kind="cosine", T=8)
    tc = TrainConfig(total_steps=10, batch_size=4, seed=7)
    a = train_denoiser(blob12, MASK_MODEL, dc, tc, tiny_arch)[-1]
    b = train_denoiser(blob12, MASK_MODEL, dc, tc, tiny_arch)[-1]
    assert a.digest() == b.digest()


def test_checkpoint_cadence(blob12, tiny_arch, tmp_path):
    dc = DiffusionConfig(T=8)
    tc = TrainConfig(total_steps=10, batch_size=4, seed=1, checkpoint_every=4)
    ckpts = train_denoiser(blob12, MASK_MODEL, dc, tc, tiny_arch, out_dir=tmp_path)
    assert [c.step for c in ckpts] == [4, 8, 10]
    files = sorted(p.name for p in tmp_path.glob("step-*.ckpt"))
    assert files == ["step-0000004.ckpt", "step-0000008.ckpt", "step-0000010.ckpt"]
    curve = (tmp_path / "curve.csv").read_text().splitlines()
    assert curve[0] == "step,loss,loss_ema"
    assert len(curve) == 11


def test_loss_ema_improves_over_training(blob12, tiny_arch):
    dc = DiffusionConfig(schedule_kind="cosine", T=8)
    tc = TrainConfig(
        total_steps=300, batch_size=8, seed=2, learning_rate=1e-3,
        checkpoint_every=20,
    )
    ckpts = train_denoiser(blob12, MASK_MODEL, dc, tc, tiny_arch)
    first = ckpts[0].extra["loss_ema"]
    last = ckpts[-1].extra["loss_ema"]
    assert last < first


def test_overfit_single_sample(blob12):
    # memorizing one mask makes the noise exactly recoverable
    from polypdiff.data import PairedDataset

    one = PairedDataset(blob12.samples[:1], 16)
    dc = DiffusionConfig(schedule_kind="cosine", T=8)
    tc = TrainConfig(total_steps=2000, batch_size=4, seed=3, learning_rate=2e-3)
    arch = DenoiserArch(
        base_channels=8, depth=2, in_channels=1, cond_channels=0, embed_dim=32
    )
    final = train_denoiser(one, MASK_MODEL, dc, tc, arch)[-1]
    assert final.extra["loss_ema"] < 0.05


def test_model_kind_and_conditioning_are_checked(blob12, tiny_arch):
    with pytest.raises(InvalidConfig):
        train_denoiser(
            blob12, MASK_MODEL,
            DiffusionConfig(T=4, conditioning="mask_concat"),
            TrainConfig(total_steps=1), tiny_arch,
        )
    with pytest.raises(InvalidConfig):
        train_denoiser(
            blob12, IMAGE_MODEL, DiffusionConfig(T=4),
            TrainConfig(total_steps=1),
        )
    with pytest.raises(InvalidConfig):
        train_denoiser(
            blob12, "translator", DiffusionConfig(T=4), TrainConfig(total_steps=1)
        )


def test_checkpoint_rebuild_reproduces_outputs(mask_ckpt, rng):
    net = net_from_checkpoint(mask_ckpt)
    sched = schedule_from_checkpoint(mask_ckpt)
    assert sched.T == mask_ckpt.diffusion["T"]
    x = torch.randn(1, 1, 16, 16, generator=rng)
    a = net(x, torch.tensor([3]))
    b = net_from_checkpoint(mask_ckpt)(x, torch.tensor([3]))
    assert torch.equal(a, b)


def test_checkpoint_records_training_context(mask_ckpt):
    assert mask_ckpt.kind == MASK_MODEL
    assert mask_ckpt.step == 40
    assert mask_ckpt.extra["resolution"] == 16
    assert math.isfinite(mask_ckpt.extra["loss_ema"])


def test_latent_style_tensor_training_runs(rng):
    x0 = torch.rand(6, 4, 4, 4, generator=rng) * 2 - 1
    cond = torch.rand(6, 1, 4, 4, generator=rng) * 2 - 1
    dc = DiffusionConfig(T=4, conditioning="mask_concat")
    tc = TrainConfig(total_steps=5, batch_size=3, seed=0)
    ckpt = train_denoiser_on_tensors(x0, cond, IMAGE_MODEL, dc, tc)[-1]
    assert ckpt.arch["in_channels"] == 4
    assert ckpt.arch["cond_channels"] == 1
