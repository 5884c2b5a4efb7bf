"""Multi-resolution residually connected segmentation network.

Alongside the usual 4-level encoder/decoder, the network maintains one
residual feature stream per resolution level. Each encoder block
initializes the stream at its own resolution and reads the streams
created above it; each decoder block reads every active stream (resized
to its resolution) and writes its output back into the stream at its own
resolution as a residual update. This combines residual connectivity
(streams are modified, not just forwarded) with dense connectivity
(every block sees features from multiple resolutions at once).

An optional auxiliary head taps the decoder output at a configurable
level for deep supervision; level 1 taps the penultimate full-resolution
block, before the final unit that folds the full-resolution stream back
into the prediction.

Structural ablations: the full-resolution stream (stream 1) can be
removed, or all streams except stream 1 can be removed; both keep the
forward contract intact.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import DoubleConv, UpConv, init_prediction_head, resize_to


class _StreamRead(nn.Module):
    """Resize a stream to a target level and compress it with a 1x1 conv."""

    def __init__(self, stream_ch: int, out_ch: int, stream_level: int, target_level: int):
        super().__init__()
        self.stream_level = stream_level
        self.target_level = target_level
        self.proj = nn.Sequential(
            nn.Conv2d(stream_ch, out_ch, 1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True)
        )

    def forward(self, stream: torch.Tensor) -> torch.Tensor:
        delta = self.target_level - self.stream_level
        if delta > 0:
            stream = nn.functional.avg_pool2d(stream, kernel_size=2**delta)
        elif delta < 0:
            size = (stream.shape[-2] * 2**-delta, stream.shape[-1] * 2**-delta)
            stream = resize_to(stream, size)
        return self.proj(stream)


class MRRN(nn.Module):
    def __init__(
        self,
        in_channels: int,
        base_width: int = 40,
        num_levels: int = 4,
        deep_supervision: bool = False,
        supervision_level: int = 1,
        drop_fullres_stream: bool = False,
        keep_only_fullres_stream: bool = False,
        bottleneck_blocks: int = 2,
    ):
        super().__init__()
        if drop_fullres_stream and keep_only_fullres_stream:
            raise ValueError("stream ablations are mutually exclusive")
        if not 1 <= supervision_level <= num_levels:
            raise ValueError(f"supervision level {supervision_level} outside 1..{num_levels}")
        self.num_levels = num_levels
        self.deep_supervision = deep_supervision
        self.supervision_level = supervision_level

        # Stream s lives at resolution level s-1; active set honours ablation.
        streams = set(range(1, num_levels + 1))
        if drop_fullres_stream:
            streams -= {1}
        if keep_only_fullres_stream:
            streams &= {1}
        self.active_streams = sorted(streams)

        widths = [base_width * 2**i for i in range(num_levels + 1)]
        self.widths = widths
        read_ch = base_width
        self.pool = nn.MaxPool2d(2)

        self.in_block = DoubleConv(in_channels, widths[0])
        self.stream_init = nn.ModuleDict()
        for s in self.active_streams:
            self.stream_init[str(s)] = nn.Sequential(
                nn.Conv2d(widths[s - 1], widths[s - 1], 1), nn.BatchNorm2d(widths[s - 1])
            )

        # Encoder blocks at levels 1..num_levels read streams created above.
        self.encoders = nn.ModuleList()
        self.enc_reads = nn.ModuleList()
        for level in range(1, num_levels + 1):
            readable = [s for s in self.active_streams if s - 1 < level]
            self.enc_reads.append(
                nn.ModuleList(
                    _StreamRead(widths[s - 1], read_ch, s - 1, level) for s in readable
                )
            )
            in_ch = widths[level - 1] + read_ch * len(readable)
            self.encoders.append(DoubleConv(in_ch, widths[level]))

        self.bottleneck = nn.Sequential(
            *[DoubleConv(widths[num_levels], widths[num_levels]) for _ in range(bottleneck_blocks)]
        )

        # Decoder blocks at levels num_levels-1 .. 0 read all streams and
        # write back to the stream at their own resolution.
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.dec_reads = nn.ModuleList()
        self.stream_writes = nn.ModuleDict()
        for level in reversed(range(num_levels)):
            self.ups.append(UpConv(widths[level + 1], widths[level]))
            self.dec_reads.append(
                nn.ModuleList(
                    _StreamRead(widths[s - 1], read_ch, s - 1, level)
                    for s in self.active_streams
                )
            )
            in_ch = widths[level] + read_ch * len(self.active_streams)
            self.decoders.append(DoubleConv(in_ch, widths[level]))
            if level + 1 in self.active_streams:
                self.stream_writes[str(level + 1)] = nn.Conv2d(widths[level], widths[level], 1)

        if 1 in self.active_streams:
            self.final_combine = DoubleConv(2 * widths[0], widths[0])
        else:
            self.final_combine = None
        self.head = init_prediction_head(nn.Conv2d(widths[0], 1, 1))
        if deep_supervision:
            self.aux_head = init_prediction_head(
                nn.Conv2d(widths[supervision_level - 1], 1, 1)
            )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Returns (main logits, aux logits or None), both at input resolution."""
        streams: dict[int, torch.Tensor] = {}
        feat = self.in_block(x)
        if 1 in self.active_streams:
            streams[1] = self.stream_init["1"](feat)

        for level in range(1, self.num_levels + 1):
            readable = [s for s in self.active_streams if s - 1 < level]
            reads = [read(streams[s]) for read, s in zip(self.enc_reads[level - 1], readable)]
            feat = self.encoders[level - 1](torch.cat([self.pool(feat)] + reads, dim=1))
            if level < self.num_levels and level + 1 in self.active_streams:
                streams[level + 1] = self.stream_init[str(level + 1)](feat)

        feat = self.bottleneck(feat)

        aux_logits = None
        dec_outputs: dict[int, torch.Tensor] = {}
        for i, level in enumerate(reversed(range(self.num_levels))):
            up = self.ups[i](feat)
            reads = [read(streams[s]) for read, s in zip(self.dec_reads[i], self.active_streams)]
            feat = self.decoders[i](torch.cat([up] + reads, dim=1))
            dec_outputs[level] = feat
            if level + 1 in self.active_streams:
                streams[level + 1] = streams[level + 1] + self.stream_writes[str(level + 1)](feat)

        if self.deep_supervision:
            tap = dec_outputs[self.supervision_level - 1]
            aux_logits = resize_to(self.aux_head(tap), x.shape[-2:])

        if self.final_combine is not None:
            feat = feat + self.final_combine(torch.cat([feat, streams[1]], dim=1))
        return self.head(feat), aux_logits
