"""The trainable noise-prediction network and its training loop.

The reference architecture is a small shape-preserving encoder-decoder:
``depth`` stride-2 downsamplings, skip connections across each resolution,
group normalization, SiLU activations, and a sinusoidal timestep embedding
added to every block through a learned linear projection. It is deliberately
tiny so that analytic gradients can be verified against finite differences
on a CPU.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .data import PairedDataset, mask_to_signal
from .diffusion import DiffusionConfig, make_schedule, training_loss
from .errors import (
    EmptyDataset,
    InvalidArch,
    InvalidConfig,
    InvalidDim,
    MissingCondition,
    NonFiniteLoss,
    ShapeMismatch,
)
from .nnutil import groups_for, seeded_init_


def timestep_embedding(
    t: int | torch.Tensor, dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal embedding: sin(t * w_i) then cos(t * w_i) halves, with
    w_i = 10000^(-2i/dim). Returns [dim] for a scalar t, [B, dim] for a batch."""
    if dim < 2 or dim % 2 != 0:
        raise InvalidDim(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = torch.pow(
        torch.tensor(10000.0, dtype=dtype),
        -2.0 * torch.arange(half, dtype=dtype) / dim,
    )
    tt = torch.as_tensor(t, dtype=dtype)
    args = tt.reshape(-1, 1) * freqs if tt.ndim > 0 else tt * freqs
    out = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return out


@dataclass(frozen=True)
class DenoiserArch:
    base_channels: int = 16
    depth: int = 2
    in_channels: int = 1
    cond_channels: int = 0
    embed_dim: int = 64

    def validate(self) -> None:
        if self.base_channels < 4:
            raise InvalidArch(f"base_channels must be >= 4, got {self.base_channels}")
        if self.depth < 1:
            raise InvalidArch(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.cond_channels < 0:
            raise InvalidArch("bad channel counts")
        if self.embed_dim < 2 or self.embed_dim % 2 != 0:
            raise InvalidArch(f"embed_dim must be even and >= 2, got {self.embed_dim}")


class _Block(nn.Module):
    """conv-norm-act twice, with the timestep embedding projected into the
    features after the first convolution."""

    def __init__(self, cin: int, cout: int, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups_for(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups_for(cout), cout)
        self.emb_proj = nn.Linear(embed_dim, cout)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(x) + self.emb_proj(emb)[:, :, None, None]
        h = F.silu(self.norm1(h))
        return F.silu(self.norm2(self.conv2(h)))


class DenoiserNet(nn.Module):
    def __init__(self, arch: DenoiserArch):
        arch.validate()
        super().__init__()
        self.arch = arch
        w = [arch.base_channels * (1 << k) for k in range(arch.depth + 1)]
        e = arch.embed_dim
        self.stem = nn.Conv2d(arch.in_channels + arch.cond_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList(_Block(w[k], w[k], e) for k in range(arch.depth))
        self.down = nn.ModuleList(
            nn.Conv2d(w[k], w[k + 1], 3, stride=2, padding=1) for k in range(arch.depth)
        )
        self.mid = _Block(w[-1], w[-1], e)
        self.up = nn.ModuleList(
            nn.Conv2d(w[k + 1], w[k], 3, padding=1) for k in range(arch.depth)
        )
        self.dec = nn.ModuleList(
            _Block(2 * w[k], w[k], e) for k in range(arch.depth)
        )
        self.head_norm = nn.GroupNorm(groups_for(w[0]), w[0])
        self.head = nn.Conv2d(w[0], arch.in_channels, 3, padding=1)

    def forward(
        self, x: torch.Tensor, t: int | torch.Tensor, cond: torch.Tensor | None = None
    ) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeMismatch(f"expected [B,C,H,W], got {tuple(x.shape)}")
        a = self.arch
        if x.shape[1] != a.in_channels:
            raise ShapeMismatch(f"expected {a.in_channels} channels, got {x.shape[1]}")
        if x.shape[-1] % (1 << a.depth) or x.shape[-2] % (1 << a.depth):
            raise ShapeMismatch(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {1 << a.depth}"
            )
        if a.cond_channels > 0:
            if cond is None:
                raise MissingCondition("this denoiser requires a condition input")
            if cond.shape != (x.shape[0], a.cond_channels, *x.shape[2:]):
                raise ShapeMismatch(
                    f"condition {tuple(cond.shape)} does not match input "
                    f"{tuple(x.shape)}"
                )
            x = torch.cat([x, cond.to(x.dtype)], dim=1)
        elif cond is not None:
            raise ShapeMismatch("unconditional denoiser was given a condition")

        dtype = self.stem.weight.dtype
        emb = timestep_embedding(t, a.embed_dim, dtype=dtype)
        if emb.ndim == 1:
            emb = emb.expand(x.shape[0], -1)

        h = self.stem(x.to(dtype))
        skips = []
        for k in range(a.depth):
            h = self.enc[k](h, emb)
            skips.append(h)
            h = self.down[k](h)
        h = self.mid(h, emb)
        for k in reversed(range(a.depth)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[k](h)
            h = self.dec[k](torch.cat([h, skips[k]], dim=1), emb)
        return self.head(F.silu(self.head_norm(h)))


def init_denoiser(arch: DenoiserArch, seed: int) -> DenoiserNet:
    """Build a denoiser with parameters drawn from a seeded generator."""
    net = DenoiserNet(arch)
    seeded_init_(net, seed)
    return net


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    total_steps: int = 1000
    checkpoint_every: int = 0  # 0 means final checkpoint only
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidConfig(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.total_steps < 1:
            raise InvalidConfig(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise InvalidConfig("checkpoint_every must be >= 0")
        if self.optimizer != "adam":
            raise InvalidConfig(f"unsupported optimizer {self.optimizer!r}")


def make_optimizer(params, tcfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        params,
        lr=tcfg.learning_rate,
        betas=(tcfg.adam_beta1, tcfg.adam_beta2),
        eps=tcfg.adam_eps,
    )


EMA_DECAY = 0.99

MASK_MODEL = "mask_model"
IMAGE_MODEL = "image_model"


def _snapshot(
    net: DenoiserNet, which: str, dcfg: DiffusionConfig, step: int, seed: int,
    loss_ema: float, resolution: int,
) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return Checkpoint(
        kind=which,
        arch=asdict(net.arch),
        diffusion=asdict(dcfg),
        step=step,
        seed=seed,
        params=params,
        extra={"loss_ema": loss_ema, "resolution": resolution},
    )


def train_denoiser_on_tensors(
    x0: torch.Tensor,
    cond: torch.Tensor | None,
    which: str,
    dcfg: DiffusionConfig,
    tcfg: TrainConfig,
    arch: DenoiserArch | None = None,
    out_dir: str | Path | None = None,
) -> list[Checkpoint]:
    """Core training loop over pre-assembled tensors.

    x0 is [N, C, H, W]; cond is [N, cond_channels, H, W] or None. Emits a
    checkpoint every ``checkpoint_every`` steps plus the final step, and
    persists checkpoints and the (step, loss, loss EMA) curve when
    ``out_dir`` is given.
    """
    tcfg.validate()
    dcfg.validate()
    if x0.shape[0] == 0:
        raise EmptyDataset("no training samples")
    n = x0.shape[0]
    if cond is not None and cond.shape[0] != n:
        raise ShapeMismatch(f"{cond.shape[0]} conditions for {n} samples")

    if arch is None:
        arch = DenoiserArch(
            in_channels=x0.shape[1],
            cond_channels=0 if cond is None else cond.shape[1],
        )
    if arch.in_channels != x0.shape[1]:
        raise InvalidArch(
            f"arch expects {arch.in_channels} channels, data has {x0.shape[1]}"
        )
    if (cond is None) != (arch.cond_channels == 0):
        raise InvalidArch("arch condition channels do not match the data")

    sched = make_schedule(dcfg)
    net = init_denoiser(arch, tcfg.seed)
    opt = make_optimizer(net.parameters(), tcfg)
    g = torch.Generator().manual_seed(tcfg.seed)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    checkpoints: list[Checkpoint] = []
    curve: list[tuple[int, float, float]] = []
    ema = 0.0
    for step in range(1, tcfg.total_steps + 1):
        idx = torch.randint(0, n, (tcfg.batch_size,), generator=g)
        xb = x0[idx]
        cb = cond[idx] if cond is not None else None
        t = torch.randint(1, dcfg.T + 1, (tcfg.batch_size,), generator=g)
        noise = torch.randn(xb.shape, generator=g)
        loss = training_loss(net, xb, cb, t, noise, sched)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema = value if step == 1 else EMA_DECAY * ema + (1 - EMA_DECAY) * value
        curve.append((step, value, ema))
        if (tcfg.checkpoint_every > 0 and step % tcfg.checkpoint_every == 0) \
                or step == tcfg.total_steps:
            ckpt = _snapshot(net, which, dcfg, step, tcfg.seed, ema, x0.shape[-1])
            checkpoints.append(ckpt)
            if out_path is not None:
                save_checkpoint(ckpt, out_path / f"step-{step:07d}.ckpt")

    if out_path is not None:
        with open(out_path / "curve.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss", "loss_ema"])
            for row in curve:
                wr.writerow([row[0], repr(row[1]), repr(row[2])])
    return checkpoints


def train_denoiser(
    ds: PairedDataset,
    which: str,
    dcfg: DiffusionConfig,
    tcfg: TrainConfig,
    arch: DenoiserArch | None = None,
    out_dir: str | Path | None = None,
) -> list[Checkpoint]:
    """Train a diffusion denoiser on a paired dataset.

    which = "mask_model": unconditional, trains on masks mapped to {-1,+1}.
    which = "image_model": trains on images with the mask (also {-1,+1})
    concatenated as a condition channel.
    """
    if which not in (MASK_MODEL, IMAGE_MODEL):
        raise InvalidConfig(f"unknown model kind {which!r}")
    if len(ds) == 0:
        raise EmptyDataset("training dataset is empty")
    if which == MASK_MODEL:
        if dcfg.conditioning != "none":
            raise InvalidConfig("mask_model must be unconditional")
        x0 = torch.stack([mask_to_signal(s.mask).unsqueeze(0) for s in ds])
        cond = None
    else:
        if dcfg.conditioning != "mask_concat":
            raise InvalidConfig("image_model requires mask_concat conditioning")
        x0 = torch.stack([s.image for s in ds])
        cond = torch.stack([mask_to_signal(s.mask).unsqueeze(0) for s in ds])
    return train_denoiser_on_tensors(x0, cond, which, dcfg, tcfg, arch, out_dir)


def net_from_checkpoint(ckpt: Checkpoint) -> DenoiserNet:
    """Rebuild a denoiser from a checkpoint; the arch is self-describing."""
    if ckpt.kind not in (MASK_MODEL, IMAGE_MODEL):
        raise InvalidConfig(f"not a denoiser checkpoint: kind {ckpt.kind!r}")
    net = DenoiserNet(DenoiserArch(**ckpt.arch))
    net.load_state_dict(ckpt.params)
    net.eval()
    return net


def schedule_from_checkpoint(ckpt: Checkpoint):
    if ckpt.diffusion is None:
        raise InvalidConfig("checkpoint carries no diffusion config")
    return make_schedule(DiffusionConfig(**ckpt.diffusion))
