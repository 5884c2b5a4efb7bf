"""Nested encoder-decoder with dense skip pathways and deep supervision.

Every nested decoder column ends in its own 1x1 prediction head; training
averages the head losses, inference uses the last head (or their mean).
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import DoubleConv, init_prediction_head, resize_to


class NestedUNet(nn.Module):
    def __init__(self, in_channels: int, base_width: int = 32, num_levels: int = 4):
        super().__init__()
        self.num_levels = num_levels
        widths = [base_width * 2**i for i in range(num_levels + 1)]
        self.pool = nn.MaxPool2d(2)

        # conv[i][j]: node at resolution level i, nested column j.
        self.nodes = nn.ModuleDict()
        for i in range(num_levels + 1):
            self.nodes[f"{i}_0"] = DoubleConv(in_channels if i == 0 else widths[i - 1], widths[i])
        for j in range(1, num_levels + 1):
            for i in range(num_levels + 1 - j):
                in_ch = widths[i] * j + widths[i + 1]
                self.nodes[f"{i}_{j}"] = DoubleConv(in_ch, widths[i])

        self.heads = nn.ModuleList(
            init_prediction_head(nn.Conv2d(widths[0], 1, 1)) for _ in range(num_levels)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Returns logits from each nested head, shallowest to deepest."""
        feats: dict[tuple[int, int], torch.Tensor] = {}
        for i in range(self.num_levels + 1):
            inp = x if i == 0 else self.pool(feats[(i - 1, 0)])
            feats[(i, 0)] = self.nodes[f"{i}_0"](inp)
        for j in range(1, self.num_levels + 1):
            for i in range(self.num_levels + 1 - j):
                size = feats[(i, 0)].shape[-2:]
                up = resize_to(feats[(i + 1, j - 1)], size)
                cat = torch.cat([feats[(i, k)] for k in range(j)] + [up], dim=1)
                feats[(i, j)] = self.nodes[f"{i}_{j}"](cat)
        return [head(feats[(0, j + 1)]) for j, head in enumerate(self.heads)]
