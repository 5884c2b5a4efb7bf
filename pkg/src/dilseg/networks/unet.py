"""Encoder-decoder segmentation networks: plain conv blocks or residual units.

Four max-pooling levels down, four transposed-conv levels up, skip
concatenations from encoder to decoder at matching resolution.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import DoubleConv, ResidualUnit, UpConv, init_prediction_head


class UNet(nn.Module):
    def __init__(
        self,
        in_channels: int,
        base_width: int = 42,
        num_levels: int = 4,
        residual: bool = False,
    ):
        super().__init__()
        block = ResidualUnit if residual else DoubleConv
        widths = [base_width * 2**i for i in range(num_levels + 1)]

        self.in_block = block(in_channels, widths[0])
        self.pool = nn.MaxPool2d(2)
        self.encoders = nn.ModuleList(
            block(widths[i], widths[i + 1]) for i in range(num_levels)
        )
        self.ups = nn.ModuleList(
            UpConv(widths[i + 1], widths[i]) for i in reversed(range(num_levels))
        )
        self.decoders = nn.ModuleList(
            block(2 * widths[i], widths[i]) for i in reversed(range(num_levels))
        )
        self.head = init_prediction_head(nn.Conv2d(widths[0], 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Returns per-pixel foreground logits at the input resolution."""
        skips = [self.in_block(x)]
        for enc in self.encoders:
            skips.append(enc(self.pool(skips[-1])))
        y = skips.pop()
        for up, dec in zip(self.ups, self.decoders):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        return self.head(y)
