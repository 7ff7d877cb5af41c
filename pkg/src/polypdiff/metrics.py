"""Generation-quality metrics.

Two families live here. The mask-similarity score: sim(r, g) is the fraction
of pixels on which two binary masks agree, and SIM(R, G) averages, over the
generated set G, each mask's best sim against the real set R, reported as a
percentage (SIM = 100 when every generated mask appears verbatim among the
reals). And FID: features are extracted per item, summarized as Gaussian
moments, and compared with the Frechet distance. The default extractor is an
8x8 area-pool of the pixels themselves (d = 64), so values are comparable
only across runs of this pipeline, not to FIDs from pretrained networks.
All pairwise similarity counts are computed exactly (integer agreement
counts divided in float64), so results match brute-force enumeration bit
for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    DimensionMismatch,
    EmptySet,
    NonPSDInput,
    ShapeMismatch,
    TooFewSamples,
)
from .nnutil import ConvBlock, seeded_init_

EIG_REJECT = -1e-6  # eigenvalues below this are an error, above are clamped to 0


# --- mask similarity --------------------------------------------------------

def sim(r: torch.Tensor, g: torch.Tensor) -> float:
    """Fraction of pixels where the two masks agree, in [0, 1]."""
    if r.shape != g.shape:
        raise ShapeMismatch(f"mask shapes differ: {tuple(r.shape)} vs {tuple(g.shape)}")
    agree = int((r.to(torch.uint8) == g.to(torch.uint8)).sum())
    return agree / r.numel()


def _flat_binary(masks: Sequence[torch.Tensor]) -> torch.Tensor:
    mats = [m.reshape(-1).to(torch.float32) for m in masks]
    sizes = {m.numel() for m in mats}
    if len(sizes) != 1:
        raise ShapeMismatch("masks in a set must share one resolution")
    return torch.stack(mats)


def sim_matrix(
    R: Sequence[torch.Tensor], G: Sequence[torch.Tensor]
) -> torch.Tensor:
    """All-pairs sim as a float64 [|G|, |R|] matrix.

    Agreement counts come from one inner product: matches = N - |r| - |g|
    + 2 * g.r for binary vectors. Counts stay below 2^24, so the float32
    matmul is exact and the division happens in float64.
    """
    if len(R) == 0 or len(G) == 0:
        raise EmptySet("similarity needs non-empty mask sets")
    rmat = _flat_binary(R)
    gmat = _flat_binary(G)
    if rmat.shape[1] != gmat.shape[1]:
        raise ShapeMismatch("real and generated masks must share one resolution")
    n = rmat.shape[1]
    inter = gmat @ rmat.T
    agree = n - gmat.sum(1, keepdim=True) - rmat.sum(1) + 2.0 * inter
    return agree.to(torch.float64) / n


class ClosestMatch(NamedTuple):
    mask: torch.Tensor
    score: float
    index: int


def closest_real(g: torch.Tensor, R: Sequence[torch.Tensor]) -> ClosestMatch:
    """The real mask most similar to g; ties go to the lowest index in R."""
    row = sim_matrix(R, [g])[0]
    idx = int(torch.argmax(row))  # argmax returns the first maximal index
    return ClosestMatch(R[idx], float(row[idx]), idx)


def SIM(R: Sequence[torch.Tensor], G: Sequence[torch.Tensor]) -> float:
    """Mean over G of the best match in R, as a percentage in [0, 100]."""
    best = sim_matrix(R, G).max(dim=1).values
    return float(100.0 * best.mean())


# --- feature extraction for FID --------------------------------------------

POOLED_SIZE = 8


def _to_single_channel(item: torch.Tensor) -> torch.Tensor:
    """Mask [H,W] or image [C,H,W] to a float32 [1,H,W] grid; multi-channel
    images are channel-averaged."""
    if item.ndim == 2:
        return item.to(torch.float32).unsqueeze(0)
    if item.ndim == 3:
        return item.to(torch.float32).mean(dim=0, keepdim=True)
    raise ShapeMismatch(f"expected [H,W] or [C,H,W], got {tuple(item.shape)}")


class _NoiseContrastNet(nn.Module):
    """Tiny classifier separating corpus items from Bernoulli noise grids;
    its global-average-pooled features serve as a learned FID space."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(1, width, stride=2),
            ConvBlock(width, 2 * width, stride=2),
            ConvBlock(2 * width, 2 * width),
        )
        self.head = nn.Linear(2 * width, 1)
        self.feature_dim = 2 * width

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(1)


@dataclass
class FeatureExtractor:
    kind: str                      # "downsample_pixels" | "trained_encoder"
    output_dim: int
    encoder: nn.Module | None = None


def downsample_extractor() -> FeatureExtractor:
    return FeatureExtractor("downsample_pixels", POOLED_SIZE * POOLED_SIZE)


def train_feature_encoder(
    items: Sequence[torch.Tensor],
    seed: int,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> FeatureExtractor:
    """Fit the noise-contrast encoder on a corpus and return it frozen."""
    if len(items) == 0:
        raise EmptySet("cannot train a feature encoder on an empty corpus")
    data = torch.stack([_to_single_channel(m) for m in items])
    net = _NoiseContrastNet()
    seeded_init_(net, seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    n = data.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=g)
        pos = data[idx]
        neg = (torch.rand(pos.shape, generator=g) < 0.5).to(torch.float32)
        x = torch.cat([pos, neg])
        y = torch.cat([torch.ones(batch_size), torch.zeros(batch_size)])
        loss = F.binary_cross_entropy_with_logits(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return FeatureExtractor("trained_encoder", net.feature_dim, net)


def extract_features(
    items: Sequence[torch.Tensor], fx: FeatureExtractor
) -> torch.Tensor:
    """Feature matrix [n, output_dim] in float64, one row per item."""
    if len(items) == 0:
        raise EmptySet("no items to extract features from")
    grids = torch.stack([_to_single_channel(m) for m in items])
    if fx.kind == "downsample_pixels":
        pooled = F.adaptive_avg_pool2d(grids, (POOLED_SIZE, POOLED_SIZE))
        return pooled.reshape(len(items), -1).to(torch.float64)
    if fx.kind == "trained_encoder":
        if fx.encoder is None:
            raise ShapeMismatch("trained_encoder extractor has no encoder")
        with torch.no_grad():
            return fx.encoder.features(grids).to(torch.float64)
    raise ShapeMismatch(f"unknown extractor kind {fx.kind!r}")


# --- Gaussian moments and the Frechet distance ------------------------------

@dataclass
class GaussianStats:
    mu: torch.Tensor     # float64 [d]
    sigma: torch.Tensor  # float64 [d, d], symmetric


def gaussian_stats(feats: torch.Tensor) -> GaussianStats:
    """Column mean and unbiased (n-1) covariance, symmetrized."""
    if feats.ndim != 2:
        raise ShapeMismatch(f"expected [n, d], got {tuple(feats.shape)}")
    n = feats.shape[0]
    if n < 2:
        raise TooFewSamples(f"covariance needs n >= 2, got {n}")
    x = feats.to(torch.float64)
    mu = x.mean(dim=0)
    c = x - mu
    sigma = (c.T @ c) / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu, sigma)


def psd_sqrt(m: torch.Tensor) -> torch.Tensor:
    """Symmetric PSD square root via eigendecomposition. Eigenvalues in
    [EIG_REJECT, 0] are clamped to zero; anything lower raises."""
    sym = 0.5 * (m + m.T).to(torch.float64)
    vals, vecs = torch.linalg.eigh(sym)
    if float(vals.min()) < EIG_REJECT:
        raise NonPSDInput(f"matrix has eigenvalue {float(vals.min())} < {EIG_REJECT}")
    vals = vals.clamp(min=0.0)
    return (vecs * vals.sqrt()) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2)),
    clamped to be nonnegative."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionMismatch(
            f"stats dimensions differ: {tuple(a.mu.shape)} vs {tuple(b.mu.shape)}"
        )
    root_a = psd_sqrt(a.sigma)
    inner = root_a @ b.sigma.to(torch.float64) @ root_a
    vals = torch.linalg.eigvalsh(0.5 * (inner + inner.T))
    if float(vals.min()) < EIG_REJECT:
        raise NonPSDInput(f"product has eigenvalue {float(vals.min())} < {EIG_REJECT}")
    tr_sqrt = float(vals.clamp(min=0.0).sqrt().sum())
    mean_term = float(((a.mu - b.mu) ** 2).sum())
    dist = mean_term + float(a.sigma.trace() + b.sigma.trace()) - 2.0 * tr_sqrt
    return max(dist, 0.0)


def fid(
    real_items: Sequence[torch.Tensor],
    gen_items: Sequence[torch.Tensor],
    fx: FeatureExtractor,
) -> float:
    if len(real_items) < 2 or len(gen_items) < 2:
        raise TooFewSamples("fid needs at least 2 items on each side")
    return frechet_distance(
        gaussian_stats(extract_features(real_items, fx)),
        gaussian_stats(extract_features(gen_items, fx)),
    )


# --- per-checkpoint evaluation rows ----------------------------------------

@dataclass
class CheckpointRecord:
    """One generator checkpoint's evaluation: FID always, SIM for masks.
    n_real/n_gen record the sample sizes the FID was computed from."""

    checkpoint_id: int
    fid: float
    sim: float | None = None
    n_real: int | None = None
    n_gen: int | None = None
