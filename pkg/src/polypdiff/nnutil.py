"""Small shared building blocks for the conv nets in this package."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def groups_for(ch: int) -> int:
    """GroupNorm group count: 8 when it divides the channel count, else the
    largest power-of-two divisor of both."""
    return math.gcd(ch, 8)


class ConvBlock(nn.Module):
    """3x3 conv + group norm + SiLU."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(groups_for(cout), cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.silu(self.norm(self.conv(x)))


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Re-initialize conv/linear weights uniformly in +-1/sqrt(fan_in) and
    norm layers to identity, all from one seeded generator. Module
    registration order makes the draw order deterministic."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1] * math.prod(m.weight.shape[2:])
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
