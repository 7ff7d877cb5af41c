"""Optional latent mode: a small convolutional autoencoder that compresses
images by a power-of-two factor so diffusion can run on the latent grid.

The encoder ends in a tanh, bounding latents to (-1, 1). That keeps every
diffusion-core convention (unit-range data, x0 clamping) valid in latent
mode without special cases; the same applies to the decoder output. The
condition mask is area-pooled to latent resolution rather than encoded, so
its foreground mass survives the downsampling exactly.
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
from .data import PairedDataset
from .denoiser import TrainConfig, make_optimizer
from .errors import (
    EmptyDataset,
    IndivisibleSize,
    InvalidArch,
    InvalidConfig,
    NonFiniteLoss,
    ShapeMismatch,
)
from .nnutil import ConvBlock, seeded_init_


@dataclass(frozen=True)
class AutoencoderArch:
    downsample_factor: int = 4   # power of 2
    latent_channels: int = 4
    in_channels: int = 1
    base_channels: int = 16

    def validate(self) -> None:
        f = self.downsample_factor
        if f < 2 or f & (f - 1):
            raise InvalidArch(f"downsample_factor must be a power of 2 >= 2, got {f}")
        if self.latent_channels < 1 or self.in_channels < 1 or self.base_channels < 4:
            raise InvalidArch("bad channel counts")


class AutoencoderNet(nn.Module):
    def __init__(self, arch: AutoencoderArch):
        arch.validate()
        super().__init__()
        self.arch = arch
        levels = int(math.log2(arch.downsample_factor))
        w = [arch.base_channels * (1 << k) for k in range(levels + 1)]
        enc: list[nn.Module] = [ConvBlock(arch.in_channels, w[0])]
        for k in range(levels):
            enc.append(ConvBlock(w[k], w[k + 1], stride=2))
            enc.append(ConvBlock(w[k + 1], w[k + 1]))
        enc.append(nn.Conv2d(w[-1], arch.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [ConvBlock(arch.latent_channels, w[-1])]
        for k in reversed(range(levels)):
            dec.append(nn.Upsample(scale_factor=2, mode="nearest"))
            dec.append(ConvBlock(w[k + 1], w[k]))
            dec.append(ConvBlock(w[k], w[k]))
        dec.append(nn.Conv2d(w[0], arch.in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.encoder(image))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.decoder(z))


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 3:
        return x.unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatch(f"expected [C,H,W] or [B,C,H,W], got {tuple(x.shape)}")


def encode(ae: AutoencoderNet, image: torch.Tensor) -> torch.Tensor:
    """Image [C,H,W] (or batch) to a latent [latent_channels, H/f, W/f]."""
    x, single = _batched(image)
    a = ae.arch
    if x.shape[1] != a.in_channels:
        raise ShapeMismatch(f"expected {a.in_channels} channels, got {x.shape[1]}")
    if x.shape[-1] % a.downsample_factor or x.shape[-2] % a.downsample_factor:
        raise ShapeMismatch(
            f"spatial size {tuple(x.shape[-2:])} not divisible by "
            f"{a.downsample_factor}"
        )
    with torch.no_grad():
        z = ae.encode(x)
    return z.squeeze(0) if single else z


def decode(ae: AutoencoderNet, z: torch.Tensor) -> torch.Tensor:
    """Latent back to an image in [-1, 1]."""
    x, single = _batched(z)
    if x.shape[1] != ae.arch.latent_channels:
        raise ShapeMismatch(
            f"expected {ae.arch.latent_channels} latent channels, got {x.shape[1]}"
        )
    with torch.no_grad():
        out = ae.decode(x)
    return out.squeeze(0) if single else out


def downsample_condition(
    mask: torch.Tensor, f: int, scaled: bool = True
) -> torch.Tensor:
    """Area-average a {0,1} mask down by factor f. Returns values in [0,1],
    or rescaled to [-1,1] when ``scaled`` (the form the denoiser consumes).
    The unscaled grid preserves foreground mass: mean(pooled) = mean(mask)."""
    if mask.ndim != 2:
        raise ShapeMismatch(f"expected [H,W] mask, got {tuple(mask.shape)}")
    if mask.shape[0] % f or mask.shape[1] % f:
        raise IndivisibleSize(
            f"mask size {tuple(mask.shape)} not divisible by f={f}"
        )
    pooled = F.avg_pool2d(
        mask.to(torch.float32).unsqueeze(0).unsqueeze(0), kernel_size=f
    ).squeeze(0).squeeze(0)
    return pooled * 2.0 - 1.0 if scaled else pooled


def reconstruction_psnr(ae: AutoencoderNet, images: torch.Tensor) -> float:
    """PSNR in dB over a [N,C,H,W] batch, peak-to-peak range 2 for [-1,1] data."""
    with torch.no_grad():
        mse = float(((ae.decode(ae.encode(images)) - images) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(4.0 / mse)


def train_autoencoder(
    ds: PairedDataset,
    tcfg: TrainConfig,
    arch: AutoencoderArch | None = None,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Minimize MSE reconstruction error on the dataset's images; returns an
    autoencoder checkpoint whose extra field reports the training-set PSNR."""
    tcfg.validate()
    if len(ds) == 0:
        raise EmptyDataset("autoencoder training dataset is empty")
    images = torch.stack([s.image for s in ds])
    if arch is None:
        arch = AutoencoderArch(in_channels=images.shape[1])
    if arch.in_channels != images.shape[1]:
        raise InvalidArch(
            f"arch expects {arch.in_channels} channels, data has {images.shape[1]}"
        )
    if ds.resolution % arch.downsample_factor:
        raise InvalidConfig(
            f"resolution {ds.resolution} not divisible by downsample factor "
            f"{arch.downsample_factor}"
        )

    ae = AutoencoderNet(arch)
    seeded_init_(ae, tcfg.seed)
    opt = make_optimizer(ae.parameters(), tcfg)
    g = torch.Generator().manual_seed(tcfg.seed)
    n = images.shape[0]
    curve = []
    for step in range(1, tcfg.total_steps + 1):
        idx = torch.randint(0, n, (tcfg.batch_size,), generator=g)
        xb = images[idx]
        loss = ((ae.decode(ae.encode(xb)) - xb) ** 2).mean()
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, value))

    psnr = reconstruction_psnr(ae, images)
    ckpt = Checkpoint(
        kind="autoencoder",
        arch=asdict(arch),
        diffusion=None,
        step=tcfg.total_steps,
        seed=tcfg.seed,
        params={k: v.detach().clone() for k, v in ae.state_dict().items()},
        extra={"psnr_db": psnr},
    )
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_path / f"step-{tcfg.total_steps:07d}.ckpt")
        with open(out_path / "curve.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss"])
            for step, value in curve:
                wr.writerow([step, repr(value)])
    return ckpt


def ae_from_checkpoint(ckpt: Checkpoint) -> AutoencoderNet:
    if ckpt.kind != "autoencoder":
        raise InvalidConfig(f"not an autoencoder checkpoint: kind {ckpt.kind!r}")
    ae = AutoencoderNet(AutoencoderArch(**ckpt.arch))
    ae.load_state_dict(ckpt.params)
    ae.eval()
    return ae


def latent_training_tensors(
    ae: AutoencoderNet, ds: PairedDataset
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encode a paired dataset for latent-space diffusion training: returns
    (latents [N,zc,h,w], pooled mask conditions [N,1,h,w] in [-1,1])."""
    if len(ds) == 0:
        raise EmptyDataset("no samples to encode")
    f = ae.arch.downsample_factor
    latents = encode(ae, torch.stack([s.image for s in ds]))
    conds = torch.stack([
        downsample_condition(s.mask, f).unsqueeze(0) for s in ds
    ])
    return latents, conds
