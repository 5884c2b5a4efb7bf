"""Segmentation architectures behind a uniform forward contract.

``build_network`` turns a ``NetworkSpec`` into a module whose forward maps
a (B, C, H, W) batch to a ``ForwardOutput``: a main probability map of the
same in-plane shape, optional auxiliary maps (deep supervision), and
optional detections for the detection-plus-segmentation variants.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from enum import Enum

import torch
from torch import nn

from .fpsnet import FPSNet, boxes_to_mask
from .mrrn import MRRN
from .unet import UNet
from .unetpp import NestedUNet


class Architecture(str, Enum):
    UNET = "UNET"
    UNETPP = "UNETPP"
    RESUNET = "RESUNET"
    MRRN = "MRRN"
    MRRN_DS = "MRRN_DS"
    FPSNET = "FPSNET"
    FPSNET_SL = "FPSNET_SL"


class StreamAblation(str, Enum):
    NONE = "NONE"
    DROP_FULLRES_STREAM = "DROP_FULLRES_STREAM"
    KEEP_ONLY_FULLRES_STREAM = "KEEP_ONLY_FULLRES_STREAM"


class BackboneInit(str, Enum):
    PRETRAINED = "PRETRAINED"
    RANDOM = "RANDOM"


MRRN_FAMILY = {Architecture.MRRN, Architecture.MRRN_DS}
FPS_FAMILY = {Architecture.FPSNET, Architecture.FPSNET_SL}

# Channel widths fitted so default parameter counts land on the reference
# budgets (13M / 9M / 32M / 39M); frozen here, see count_parameters tests.
DEFAULT_BASE_WIDTH = {
    Architecture.UNET: 42,
    Architecture.UNETPP: 32,
    Architecture.RESUNET: 64,
    Architecture.MRRN: 44,
    Architecture.MRRN_DS: 44,
    Architecture.FPSNET: 64,
    Architecture.FPSNET_SL: 64,
}


@dataclass
class NetworkSpec:
    architecture: Architecture
    in_channels: int | None = None  # default 5, or 3 for the detection variants
    num_levels: int = 4
    base_width: int | None = None
    supervision_level: int = 1
    ablation: StreamAblation = StreamAblation.NONE
    backbone: BackboneInit = BackboneInit.RANDOM
    unetpp_inference: str = "last"  # or "mean"
    freeze_backbone: bool = False

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.ablation = StreamAblation(self.ablation)
        self.backbone = BackboneInit(self.backbone)
        if self.in_channels is None:
            self.in_channels = 3 if self.architecture in FPS_FAMILY else 5
        if self.base_width is None:
            self.base_width = DEFAULT_BASE_WIDTH[self.architecture]
        if self.in_channels % 2 == 0:
            raise ValueError(f"in_channels must be odd, got {self.in_channels}")
        if not 1 <= self.supervision_level <= self.num_levels:
            raise ValueError(
                f"supervision_level {self.supervision_level} outside 1..{self.num_levels}"
            )
        if self.ablation != StreamAblation.NONE and self.architecture not in MRRN_FAMILY:
            raise ValueError(f"stream ablation is undefined for {self.architecture.value}")
        if self.unetpp_inference not in ("last", "mean"):
            raise ValueError(f"unetpp_inference must be 'last' or 'mean'")

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("architecture", "ablation", "backbone"):
            d[key] = d[key].value
        return d

    @staticmethod
    def from_json(d: dict) -> "NetworkSpec":
        return NetworkSpec(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class ForwardOutput:
    """Per-pixel foreground probabilities plus optional extras.

    main: (B, 1, H, W) probabilities at the input in-plane shape.
    aux: deep-supervision map (same shape), or list of nested-head maps.
    detections: per-sample (box, score) list for detection variants;
        boxes are in input-frame array coordinates.
    seg_highres: internal-resolution probabilities (detection variants).
    detection_raw: (cls_logits, box_deltas, anchors) for training.
    """

    main: torch.Tensor
    aux: torch.Tensor | list[torch.Tensor] | None = None
    detections: list | None = None
    seg_highres: torch.Tensor | None = None
    detection_raw: tuple | None = None


def apply_ablation(spec: NetworkSpec, ablation: StreamAblation | str | None = None) -> NetworkSpec:
    """Validated copy of ``spec`` with the requested stream ablation."""
    ablation = StreamAblation(ablation) if ablation is not None else spec.ablation
    if ablation != StreamAblation.NONE and spec.architecture not in MRRN_FAMILY:
        raise ValueError(f"stream ablation is undefined for {spec.architecture.value}")
    return replace(spec, ablation=ablation)


class SegmentationNetwork(nn.Module):
    """Wraps an architecture behind the ForwardOutput contract."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        arch = spec.architecture
        if arch == Architecture.UNET:
            self.net = UNet(spec.in_channels, spec.base_width, spec.num_levels, residual=False)
        elif arch == Architecture.RESUNET:
            self.net = UNet(spec.in_channels, spec.base_width, spec.num_levels, residual=True)
        elif arch == Architecture.UNETPP:
            self.net = NestedUNet(spec.in_channels, spec.base_width, spec.num_levels)
        elif arch in MRRN_FAMILY:
            self.net = MRRN(
                spec.in_channels,
                spec.base_width,
                spec.num_levels,
                deep_supervision=(arch == Architecture.MRRN_DS),
                supervision_level=spec.supervision_level,
                drop_fullres_stream=(spec.ablation == StreamAblation.DROP_FULLRES_STREAM),
                keep_only_fullres_stream=(
                    spec.ablation == StreamAblation.KEEP_ONLY_FULLRES_STREAM
                ),
            )
        elif arch in FPS_FAMILY:
            self.net = FPSNet(
                spec.in_channels, pretrained=(spec.backbone == BackboneInit.PRETRAINED)
            )
            if spec.freeze_backbone:
                for layer in (self.net.stem, self.net.layer1, self.net.layer2,
                              self.net.layer3, self.net.layer4):
                    for p in layer.parameters():
                        p.requires_grad_(False)
        else:
            raise ValueError(f"unknown architecture {arch}")

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected (B, {self.spec.in_channels}, H, W) batch, got {tuple(x.shape)}"
            )
        arch = self.spec.architecture
        if arch in (Architecture.UNET, Architecture.RESUNET):
            return ForwardOutput(main=torch.sigmoid(self.net(x)))
        if arch == Architecture.UNETPP:
            heads = [torch.sigmoid(h) for h in self.net(x)]
            if self.spec.unetpp_inference == "mean":
                main = torch.stack(heads).mean(dim=0)
            else:
                main = heads[-1]
            return ForwardOutput(main=main, aux=heads)
        if arch in MRRN_FAMILY:
            logits, aux_logits = self.net(x)
            aux = torch.sigmoid(aux_logits) if aux_logits is not None else None
            return ForwardOutput(main=torch.sigmoid(logits), aux=aux)
        # Detection variants run internally at 256 and resize back.
        seg_logits, cls_logits, box_deltas, anchors = self.net(x)
        highres = torch.sigmoid(seg_logits)
        main = nn.functional.interpolate(
            highres, size=x.shape[-2:], mode="bilinear", align_corners=False
        ).clamp(0.0, 1.0)
        detections = self.net.detect(cls_logits, box_deltas)
        scale = x.shape[-2] / seg_logits.shape[-2]
        gated = []
        for b, dets in enumerate(detections):
            mask = boxes_to_mask(dets, tuple(x.shape[-2:]), scale).to(main.device)
            gated.append(main[b] * mask)
        main = torch.stack(gated, dim=0)
        input_frame = [
            [([c * scale for c in box], score) for box, score in dets] for dets in detections
        ]
        return ForwardOutput(
            main=main,
            detections=input_frame,
            seg_highres=highres,
            detection_raw=(cls_logits, box_deltas, anchors),
        )


def build_network(spec: NetworkSpec) -> SegmentationNetwork:
    return SegmentationNetwork(spec)


def count_parameters(net: nn.Module, trainable_only: bool = True) -> int:
    """Exact count of (trainable) scalar parameters."""
    return sum(p.numel() for p in net.parameters() if p.requires_grad or not trainable_only)
