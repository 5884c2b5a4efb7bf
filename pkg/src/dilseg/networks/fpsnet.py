"""Detection-plus-segmentation network.

A ResNet-50 backbone (optionally ImageNet-pretrained, random otherwise)
feeds (a) a one-class anchor-based detection sub-network over an FPN with
focal-loss training, and (b) a Unet-shaped segmentation decoder that
fuses backbone features across scales. The network operates internally
at 256x256: inputs are bilinearly upsampled on entry and the main
probability map is resized back to the input frame. At inference the
segmentation is masked to the union of detected boxes above score 0.5.

The smoothed-label variant differs only in how training targets are
interpolated (bilinear instead of nearest neighbour); the architecture
is shared.
"""

from __future__ import annotations

import math
import warnings

import torch
import torchvision
from torch import nn

from .blocks import DoubleConv, conv_bn_relu, init_prediction_head, resize_to

INTERNAL_SIZE = (256, 256)
SCORE_THRESHOLD = 0.5
FPN_CHANNELS = 128
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
ANCHOR_SCALES = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))


def _make_backbone(in_channels: int, pretrained: bool) -> torchvision.models.ResNet:
    weights = None
    if pretrained:
        try:
            weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1
            net = torchvision.models.resnet50(weights=weights)
        except Exception as exc:  # no weights cached/downloadable
            warnings.warn(f"pretrained backbone unavailable ({exc}); using random init")
            net = torchvision.models.resnet50(weights=None)
    else:
        net = torchvision.models.resnet50(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
    return net


class _FPN(nn.Module):
    """Feature pyramid P3..P7 from backbone stages C3..C5."""

    def __init__(self, c3: int, c4: int, c5: int, out_ch: int):
        super().__init__()
        self.lat3 = nn.Conv2d(c3, out_ch, 1)
        self.lat4 = nn.Conv2d(c4, out_ch, 1)
        self.lat5 = nn.Conv2d(c5, out_ch, 1)
        self.smooth3 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.smooth4 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.p6 = nn.Conv2d(c5, out_ch, 3, stride=2, padding=1)
        self.p7 = nn.Sequential(nn.ReLU(), nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1))

    def forward(self, c3, c4, c5):
        p5 = self.lat5(c5)
        p4 = self.smooth4(self.lat4(c4) + resize_to(p5, c4.shape[-2:]))
        p3 = self.smooth3(self.lat3(c3) + resize_to(p4, c3.shape[-2:]))
        p6 = self.p6(c5)
        p7 = self.p7(p6)
        return [p3, p4, p5, p6, p7]


class _DetectionHead(nn.Module):
    """Shared classification/regression subnets over all pyramid levels."""

    def __init__(self, channels: int, num_anchors: int, depth: int = 2):
        super().__init__()

        def subnet(out_per_anchor: int) -> nn.Sequential:
            layers = []
            for _ in range(depth):
                layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
            layers.append(nn.Conv2d(channels, num_anchors * out_per_anchor, 3, padding=1))
            return nn.Sequential(*layers)

        self.cls_subnet = subnet(1)
        self.box_subnet = subnet(4)
        # Bias so initial foreground probability is low (focal-loss convention).
        prior = 0.01
        nn.init.constant_(self.cls_subnet[-1].bias, -math.log((1 - prior) / prior))

    def forward(self, features: list[torch.Tensor]):
        cls_out, box_out = [], []
        for feat in features:
            b = feat.shape[0]
            cls = self.cls_subnet(feat).permute(0, 2, 3, 1).reshape(b, -1)
            box = self.box_subnet(feat).permute(0, 2, 3, 1).reshape(b, -1, 4)
            cls_out.append(cls)
            box_out.append(box)
        return torch.cat(cls_out, dim=1), torch.cat(box_out, dim=1)


def make_anchors(image_size: tuple[int, int], strides=(8, 16, 32, 64, 128)) -> torch.Tensor:
    """All anchor boxes over the pyramid, ordered cell-major then shape to
    match the head output layout. Boxes are (a0_min, a1_min, a0_max, a1_max)
    in array-index coordinates."""
    shapes = []
    for scale in ANCHOR_SCALES:
        for ratio in ANCHOR_RATIOS:
            shapes.append((scale * math.sqrt(1.0 / ratio), scale * math.sqrt(ratio)))
    shapes_t = torch.tensor(shapes)  # (A, 2) relative extents

    levels = []
    for stride in strides:
        f0 = image_size[0] // stride
        f1 = image_size[1] // stride
        c0, c1 = torch.meshgrid(
            (torch.arange(f0, dtype=torch.float32) + 0.5) * stride,
            (torch.arange(f1, dtype=torch.float32) + 0.5) * stride,
            indexing="ij",
        )
        centers = torch.stack([c0.reshape(-1), c1.reshape(-1)], dim=1)  # (cells, 2)
        base = 4.0 * stride
        half = (base / 2.0) * shapes_t  # (A, 2)
        lo = centers[:, None, :] - half[None, :, :]
        hi = centers[:, None, :] + half[None, :, :]
        levels.append(torch.cat([lo, hi], dim=2).reshape(-1, 4))
    return torch.cat(levels, dim=0)


def encode_boxes(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh) regression targets of ``boxes`` against ``anchors``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2
    ay = (anchors[:, 1] + anchors[:, 3]) / 2
    bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1.0)
    bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1.0)
    bx = (boxes[:, 0] + boxes[:, 2]) / 2
    by = (boxes[:, 1] + boxes[:, 3]) / 2
    return torch.stack(
        [(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=1
    )


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2
    ay = (anchors[:, 1] + anchors[:, 3]) / 2
    bx = ax + deltas[:, 0] * aw
    by = ay + deltas[:, 1] * ah
    bw = aw * torch.exp(deltas[:, 2].clamp(max=8.0))
    bh = ah * torch.exp(deltas[:, 3].clamp(max=8.0))
    return torch.stack([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2], dim=1)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torchvision.ops.box_iou(a, b)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha=0.25, gamma=2.0) -> torch.Tensor:
    """Sigmoid focal loss summed over anchors (targets in {0, 1})."""
    p = torch.sigmoid(logits)
    ce = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).sum()


def boxes_from_mask(mask2d: torch.Tensor | None) -> torch.Tensor:
    """Tight boxes (x1, y1, x2, y2) around 8-connected foreground components
    of a 2D mask; coordinates follow (row=y? no: row=x) -- boxes are in
    (axis0, axis1) order mapped to (x, y) to match anchor coordinates."""
    import numpy as np
    from scipy import ndimage

    if mask2d is None:
        return torch.zeros((0, 4))
    arr = np.asarray(mask2d) > 0.5
    labeled, n = ndimage.label(arr, structure=np.ones((3, 3), dtype=bool))
    boxes = []
    for sl in ndimage.find_objects(labeled):
        if sl is None:
            continue
        x0, x1 = sl[0].start, sl[0].stop
        y0, y1 = sl[1].start, sl[1].stop
        boxes.append([x0, y0, x1, y1])
    if not boxes:
        return torch.zeros((0, 4))
    return torch.tensor(boxes, dtype=torch.float32)


class _SegDecoder(nn.Module):
    """Unet-shaped decoder over the backbone features, up to full resolution."""

    def __init__(self, stem_ch: int, c2: int, c3: int, c4: int, c5: int):
        super().__init__()
        self.up4 = DoubleConv(c5 // 2 + c4, 256)
        self.red5 = nn.Conv2d(c5, c5 // 2, 1)
        self.up3 = DoubleConv(256 + c3, 128)
        self.up2 = DoubleConv(128 + c2, 64)
        self.up1 = DoubleConv(64 + stem_ch, 32)
        self.up0 = conv_bn_relu(32, 16)
        self.head = init_prediction_head(nn.Conv2d(16, 1, 1))

    def forward(self, stem, c2, c3, c4, c5, out_size):
        y = torch.cat([resize_to(self.red5(c5), c4.shape[-2:]), c4], dim=1)
        y = self.up4(y)
        y = self.up3(torch.cat([resize_to(y, c3.shape[-2:]), c3], dim=1))
        y = self.up2(torch.cat([resize_to(y, c2.shape[-2:]), c2], dim=1))
        y = self.up1(torch.cat([resize_to(y, stem.shape[-2:]), stem], dim=1))
        y = self.up0(resize_to(y, out_size))
        return self.head(y)


class FPSNet(nn.Module):
    def __init__(self, in_channels: int = 3, pretrained: bool = False):
        super().__init__()
        backbone = _make_backbone(in_channels, pretrained)
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu)
        self.maxpool = backbone.maxpool
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3
        self.layer4 = backbone.layer4
        self.fpn = _FPN(512, 1024, 2048, FPN_CHANNELS)
        n_anchors = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)
        self.det_head = _DetectionHead(FPN_CHANNELS, n_anchors)
        self.seg = _SegDecoder(64, 256, 512, 1024, 2048)
        self.register_buffer("anchors", make_anchors(INTERNAL_SIZE), persistent=False)

    def forward(self, x: torch.Tensor):
        """Returns (seg logits at 256, cls logits, box deltas, anchors)."""
        x = resize_to(x, INTERNAL_SIZE)
        stem = self.stem(x)
        c2 = self.layer1(self.maxpool(stem))
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        cls_logits, box_deltas = self.det_head(self.fpn(c3, c4, c5))
        seg_logits = self.seg(stem, c2, c3, c4, c5, INTERNAL_SIZE)
        return seg_logits, cls_logits, box_deltas, self.anchors

    @torch.no_grad()
    def detect(
        self, cls_logits: torch.Tensor, box_deltas: torch.Tensor, score_threshold=SCORE_THRESHOLD
    ) -> list[list[tuple[list[float], float]]]:
        """Decoded (box, score) detections per sample, NMS-deduplicated."""
        out = []
        for b in range(cls_logits.shape[0]):
            scores = torch.sigmoid(cls_logits[b])
            keep = scores > score_threshold
            if keep.sum() > 200:  # cap work on untrained heads
                top = scores.topk(200).indices
                keep = torch.zeros_like(keep)
                keep[top] = True
            boxes = decode_boxes(self.anchors[keep], box_deltas[b][keep])
            kept_scores = scores[keep]
            if boxes.numel():
                idx = torchvision.ops.nms(boxes, kept_scores, 0.5)
                boxes, kept_scores = boxes[idx], kept_scores[idx]
            out.append(
                [(box.tolist(), float(s)) for box, s in zip(boxes, kept_scores)]
            )
        return out

    def detection_loss(
        self,
        cls_logits: torch.Tensor,
        box_deltas: torch.Tensor,
        gt_boxes: list[torch.Tensor],
        pos_iou: float = 0.5,
        neg_iou: float = 0.4,
    ) -> torch.Tensor:
        """Focal classification loss plus smooth-L1 box regression, averaged
        over the batch and normalized by positive-anchor count."""
        total = cls_logits.new_zeros(())
        for b in range(cls_logits.shape[0]):
            boxes = gt_boxes[b].to(cls_logits.device)
            logits = cls_logits[b]
            if boxes.numel() == 0:
                targets = torch.zeros_like(logits)
                total = total + focal_loss(logits, targets) / logits.numel() * 100.0
                continue
            iou = box_iou(self.anchors, boxes)
            best_iou, best_gt = iou.max(dim=1)
            targets = (best_iou >= pos_iou).float()
            valid = (best_iou >= pos_iou) | (best_iou < neg_iou)
            n_pos = max(int(targets.sum()), 1)
            cls = focal_loss(logits[valid], targets[valid]) / n_pos
            pos = best_iou >= pos_iou
            if pos.any():
                reg_targets = encode_boxes(self.anchors[pos], boxes[best_gt[pos]])
                reg = nn.functional.smooth_l1_loss(
                    box_deltas[b][pos], reg_targets, reduction="sum"
                ) / n_pos
            else:
                reg = cls.new_zeros(())
            total = total + cls + reg
        return total / cls_logits.shape[0]


def boxes_to_mask(
    detections: list[tuple[list[float], float]], size: tuple[int, int], scale: float
) -> torch.Tensor:
    """Binary union-of-boxes mask at the output frame (boxes are in internal
    coordinates; ``scale`` maps them to the output frame)."""
    mask = torch.zeros(size)
    for box, _score in detections:
        x1 = max(int(box[0] * scale), 0)
        y1 = max(int(box[1] * scale), 0)
        x2 = min(int(math.ceil(box[2] * scale)), size[0])
        y2 = min(int(math.ceil(box[3] * scale)), size[1])
        if x2 > x1 and y2 > y1:
            mask[x1:x2, y1:y2] = 1.0
    return mask
