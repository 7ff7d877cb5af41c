"""Shared tiny fixtures.

Trained checkpoints are deliberately minuscule (16x16, T=12, a few dozen
steps); they exercise every code path without pretending to be good models.
Session scope keeps the training cost to one run per suite.
"""

import pytest
import torch

from polypdiff.data import synthetic_blob_dataset
from polypdiff.denoiser import (
    IMAGE_MODEL,
    MASK_MODEL,
    DenoiserArch,
    TrainConfig,
    train_denoiser,
)
from polypdiff.diffusion import DiffusionConfig


@pytest.fixture(scope="session")
def blob12():
    return synthetic_blob_dataset(12, 16, seed=0)


@pytest.fixture(scope="session")
def tiny_arch():
    return DenoiserArch(
        base_channels=8, depth=2, in_channels=1, cond_channels=0, embed_dim=32
    )


@pytest.fixture(scope="session")
def mask_ckpt(blob12, tiny_arch):
    dc = DiffusionConfig(schedule_kind="cosine", T=12)
    tc = TrainConfig(total_steps=40, batch_size=4, seed=1)
    return train_denoiser(blob12, MASK_MODEL, dc, tc, tiny_arch)[-1]


@pytest.fixture(scope="session")
def image_ckpt(blob12):
    dc = DiffusionConfig(schedule_kind="cosine", T=12, conditioning="mask_concat")
    tc = TrainConfig(total_steps=40, batch_size=4, seed=2)
    arch = DenoiserArch(
        base_channels=8, depth=2, in_channels=1, cond_channels=1, embed_dim=32
    )
    return train_denoiser(blob12, IMAGE_MODEL, dc, tc, arch)[-1]


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(99)
