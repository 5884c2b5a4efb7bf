"""Losses, augmentation, cross-validation folds, and the training loop.

Training operates on 2D slice samples with stacked neighbour-slice
channels. The optimizer is Adam with a constant learning rate for a warm
phase followed by linear decay to zero; the best-validation checkpoint is
retained and early stopping guards against overfitting. All randomness is
derived from (seed, epoch, sample index) so results are reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import __version__
from .networks import (
    Architecture,
    ForwardOutput,
    NetworkSpec,
    SegmentationNetwork,
    build_network,
)
from .networks.fpsnet import boxes_from_mask
from .preprocess import make_binary_labels, make_smoothed_labels, stack_slices
from .volumes import CaseManifest, load_image, load_mask

SCALE_RANGE = (0.9, 1.1)
ROTATION_RANGE_DEG = (-10.0, 10.0)
ELASTIC_ALPHA = 8.0  # displacement amplitude, pixels
ELASTIC_SIGMA = 6.0  # smoothing of the displacement field, pixels


@dataclass
class AugmentFlags:
    flip: bool = True
    scale: bool = True
    rotate: bool = True
    elastic: bool = True


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warm_epochs: int = 20
    decay_epochs: int = 100
    batch_size: int = 3
    mu: float = 0.75
    folds: int = 5
    early_stop_patience: int = 20
    augmentation: AugmentFlags = field(default_factory=AugmentFlags)
    seed: int = 0
    max_epochs: int | None = None  # default warm + decay
    bg_slice_ratio: float = 1.0  # background slices per foreground slice
    dice_eps: float = 1.0
    stratify_by_gs: bool = False
    target_train_loss: float | None = None  # optional smoke-test stop

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must be in (0, 1], got {self.mu}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        for name in ("lr", "warm_epochs", "decay_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs is None:
            self.max_epochs = self.warm_epochs + self.decay_epochs

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentFlags(**d["augmentation"])
        return TrainConfig(**d)


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """Learning rate at a 1-based epoch: constant through the warm phase,
    then linearly decaying to zero over the decay phase."""
    if epoch <= config.warm_epochs:
        return config.lr
    frac = (epoch - config.warm_epochs) / config.decay_epochs
    return config.lr * max(0.0, 1.0 - frac)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(pred*target) + eps) / (sum(pred) + sum(target) + eps)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    inter = (pred * target).sum()
    denom = pred.sum() + target.sum()
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def combined_loss(
    pred_main: torch.Tensor,
    pred_aux: torch.Tensor | None,
    target: torch.Tensor,
    mu: float,
    eps: float = 1.0,
) -> torch.Tensor:
    """mu * dice(main) + (1 - mu) * dice(aux); mu == 1 is exactly the main loss."""
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must be in (0, 1], got {mu}")
    if mu == 1.0:
        return soft_dice_loss(pred_main, target, eps)
    if pred_aux is None:
        raise ValueError("mu < 1 requires an auxiliary prediction")
    if pred_aux.shape != target.shape:
        raise ValueError(
            f"shape mismatch: aux {tuple(pred_aux.shape)} vs target {tuple(target.shape)}"
        )
    return mu * soft_dice_loss(pred_main, target, eps) + (1.0 - mu) * soft_dice_loss(
        pred_aux, target, eps
    )


def batch_loss(
    out: ForwardOutput, target: torch.Tensor, spec: NetworkSpec, config: TrainConfig,
    target_highres: torch.Tensor | None = None, gt_boxes: list | None = None,
    net: SegmentationNetwork | None = None,
) -> torch.Tensor:
    """Architecture-appropriate training loss for one batch; Dice sums pool
    the whole batch."""
    arch = spec.architecture
    eps = config.dice_eps
    if arch == Architecture.MRRN_DS:
        return combined_loss(out.main, out.aux, target, config.mu, eps)
    if arch == Architecture.UNETPP:
        losses = [soft_dice_loss(h, target, eps) for h in out.aux]
        return torch.stack(losses).mean()
    if arch in (Architecture.FPSNET, Architecture.FPSNET_SL):
        seg = soft_dice_loss(out.seg_highres, target_highres, eps)
        cls_logits, box_deltas, _ = out.detection_raw
        det = net.net.detection_loss(cls_logits, box_deltas, gt_boxes)
        return seg + det
    return soft_dice_loss(out.main, target, eps)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def geometric_transform(
    image: np.ndarray,
    label: np.ndarray,
    angle_deg: float = 0.0,
    scale: float = 1.0,
    elastic: tuple[np.ndarray, np.ndarray] | None = None,
    flip_lr: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one geometric transform to a (C, H, W) image and (H, W) label;
    images are linearly interpolated, labels nearest-neighbour. Flips and
    90-degree-multiple rotations take an exact integer path."""
    if flip_lr:
        image = np.flip(image, axis=-2)
        label = np.flip(label, axis=-2)
    if angle_deg % 90 == 0 and scale == 1.0 and elastic is None:
        k = int(angle_deg // 90) % 4
        if k:
            image = np.rot90(image, k, axes=(-2, -1))
            label = np.rot90(label, k, axes=(-2, -1))
        return np.ascontiguousarray(image), np.ascontiguousarray(label)

    h, w = label.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    src_y = (cos * dy - sin * dx) / scale + cy
    src_x = (sin * dy + cos * dx) / scale + cx
    if elastic is not None:
        src_y = src_y + elastic[0]
        src_x = src_x + elastic[1]
    coords = np.stack([src_y, src_x])
    out_img = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image]
    )
    out_lab = ndimage.map_coordinates(label, coords, order=0, mode="constant", cval=0.0)
    return out_img.astype(image.dtype), out_lab.astype(label.dtype)


def augment_sample(
    image: np.ndarray, label: np.ndarray, flags: AugmentFlags, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one random transform and apply it identically to image and label."""
    flip = flags.flip and rng.random() < 0.5
    angle = rng.uniform(*ROTATION_RANGE_DEG) if flags.rotate else 0.0
    scale = rng.uniform(*SCALE_RANGE) if flags.scale else 1.0
    elastic = None
    if flags.elastic:
        h, w = label.shape
        fields = []
        for _ in range(2):
            f = ndimage.gaussian_filter(rng.normal(size=(h, w)), ELASTIC_SIGMA)
            fields.append(f * ELASTIC_ALPHA)
        elastic = (fields[0], fields[1])
    return geometric_transform(image, label, angle, scale, elastic, flip)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


def make_folds(
    cases: list[CaseManifest], k: int = 5, seed: int = 0, stratify_by_gs: bool = False
) -> dict[str, int]:
    """Patient-level fold assignment; sizes differ by at most one patient
    and the result is a deterministic function of (case ids, k, seed)."""
    if len(cases) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {len(cases)}")
    ids = sorted(c.case_id for c in cases)
    rng = np.random.default_rng(seed)

    if stratify_by_gs:
        by_case = {c.case_id: c for c in cases}

        def stratum(case_id: str) -> int:
            sums = [r.gleason_sum for r in by_case[case_id].lesions if r.gleason_sum]
            return max(sums) if sums else 0

        order = sorted(ids, key=lambda cid: (stratum(cid), cid))
        perm = []
        for s in sorted({stratum(cid) for cid in order}):
            group = [cid for cid in order if stratum(cid) == s]
            rng.shuffle(group)
            perm.extend(group)
    else:
        perm = list(ids)
        rng.shuffle(perm)
    return {cid: i % k for i, cid in enumerate(perm)}


def fold_assignment_hash(assignment: dict[str, int]) -> str:
    blob = json.dumps(sorted(assignment.items()), separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Slice sampling
# ---------------------------------------------------------------------------


@dataclass
class SliceSample:
    case_id: str
    slice_index: int
    image: np.ndarray  # (C, H, W)
    label: np.ndarray  # (H, W) binary foreground


def build_slice_samples(
    cases: list[CaseManifest], in_channels: int, bg_ratio: float, seed: int
) -> list[SliceSample]:
    """All foreground slices plus a seeded sample of background slices at
    ``bg_ratio`` per foreground slice (case list order independent)."""
    k = (in_channels - 1) // 2
    samples: list[SliceSample] = []
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB6)))
    for case in sorted(cases, key=lambda c: c.case_id):
        image = load_image(case.image_path)
        mask = load_mask(case.mask_path)
        fg_flags = (mask.data > 0).any(axis=(0, 1))
        fg = [int(i) for i in np.flatnonzero(fg_flags)]
        bg = [int(i) for i in np.flatnonzero(~fg_flags)]
        n_bg = min(len(bg), int(round(bg_ratio * len(fg)))) if fg else min(len(bg), 1)
        chosen_bg = sorted(rng.choice(bg, size=n_bg, replace=False)) if n_bg else []
        for idx in sorted(fg + list(chosen_bg)):
            channels = stack_slices(image, idx, k).astype(np.float32)
            label = (mask.data[:, :, idx] > 0).astype(np.float32)
            samples.append(SliceSample(case.case_id, idx, channels, label))
    return samples


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(
    net: SegmentationNetwork, path: str | Path, config_hash: str = "", extra: dict | None = None
) -> None:
    payload = {
        "version": __version__,
        "spec": net.spec.to_json(),
        "spec_hash": net.spec.hash(),
        "config_hash": config_hash,
        "state_dict": net.state_dict(),
    }
    payload.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[SegmentationNetwork, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec = NetworkSpec.from_json(payload["spec"])
    if spec.hash() != payload.get("spec_hash"):
        raise ValueError(f"{path}: checkpoint spec hash mismatch")
    net = build_network(spec)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return net, meta


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_dice: float


@dataclass
class TrainResult:
    checkpoint_path: Path
    log: list[EpochLog]
    best_val_dice: float
    best_epoch: int
    stopped_epoch: int

    @property
    def final_train_loss(self) -> float:
        return self.log[-1].train_loss


def _hard_dice(pred: np.ndarray, target: np.ndarray) -> float:
    p = pred > 0.5
    t = target > 0.5
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def _fps_targets(labels: np.ndarray, smoothed: bool, size: tuple[int, int]):
    """Per-sample internal-resolution seg targets and ground-truth boxes."""
    highres, boxes = [], []
    for lab in labels:
        if smoothed:
            highres.append(make_smoothed_labels(lab, size))
        else:
            highres.append(make_binary_labels(lab, size))
        scale = size[0] / lab.shape[0]
        b = boxes_from_mask(lab)
        boxes.append(b * scale if b.numel() else b)
    return (
        torch.from_numpy(np.stack(highres)[:, None]).float(),
        boxes,
    )


def train_model(
    spec: NetworkSpec,
    config: TrainConfig,
    train_cases: list[CaseManifest],
    val_cases: list[CaseManifest],
    out_dir: str | Path,
    device: str = "cpu",
    config_hash: str = "",
    tag: str = "model",
) -> TrainResult:
    """Train one model: Adam with the warm/decay schedule, per-epoch
    validation Dice, best-checkpoint retention, and early stopping.
    Raises on divergence (NaN loss)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_flush_denormal(True)
    torch.manual_seed(config.seed)
    net = build_network(spec).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)

    train_samples = build_slice_samples(train_cases, spec.in_channels, config.bg_slice_ratio,
                                        config.seed)
    val_samples = build_slice_samples(val_cases, spec.in_channels, config.bg_slice_ratio,
                                      config.seed) if val_cases else []
    if not train_samples:
        raise ValueError("no training slices available")

    is_fps = spec.architecture in (Architecture.FPSNET, Architecture.FPSNET_SL)
    smoothed = spec.architecture == Architecture.FPSNET_SL
    from .networks.fpsnet import INTERNAL_SIZE

    best_val = -1.0
    best_epoch = 0
    checkpoint_path = out_dir / f"{tag}_best.pt"
    log: list[EpochLog] = []
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        lr = learning_rate(epoch, config)
        if lr == 0.0 and log:  # schedule exhausted; parameters can no longer change
            break
        for group in optimizer.param_groups:
            group["lr"] = lr
        net.train()
        order_rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch, 0x0D)))
        order = order_rng.permutation(len(train_samples))
        total_loss, total_n = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            images, labels = [], []
            for j, sample_idx in enumerate(batch_idx):
                s = train_samples[sample_idx]
                aug_rng = np.random.default_rng(
                    np.random.SeedSequence((config.seed, epoch, int(sample_idx)))
                )
                img, lab = augment_sample(s.image, s.label, config.augmentation, aug_rng)
                images.append(img)
                labels.append(lab)
            x = torch.from_numpy(np.stack(images)).float().to(device)
            y = torch.from_numpy(np.stack(labels)[:, None]).float().to(device)
            target_highres, gt_boxes = (None, None)
            if is_fps:
                target_highres, gt_boxes = _fps_targets(
                    np.stack(labels), smoothed, INTERNAL_SIZE
                )
                target_highres = target_highres.to(device)
            optimizer.zero_grad()
            out = net(x)
            loss = batch_loss(out, y, spec, config, target_highres, gt_boxes, net)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} "
                    f"(lr={lr:g}, batch starting at {start})"
                )
            loss.backward()
            optimizer.step()
            total_loss += float(loss.detach()) * len(batch_idx)
            total_n += len(batch_idx)
        train_loss = total_loss / total_n

        net.eval()
        if val_samples:
            dices = []
            with torch.no_grad():
                for start in range(0, len(val_samples), config.batch_size):
                    chunk = val_samples[start : start + config.batch_size]
                    x = torch.from_numpy(np.stack([s.image for s in chunk])).float().to(device)
                    out = net(x)
                    probs = out.main.cpu().numpy()[:, 0]
                    for p, s in zip(probs, chunk):
                        dices.append(_hard_dice(p, s.label))
            val_dice = float(np.mean(dices))
        else:
            val_dice = float("nan")
        log.append(EpochLog(epoch=epoch, lr=lr, train_loss=train_loss, val_dice=val_dice))

        if val_samples:
            if val_dice > best_val:
                best_val = val_dice
                best_epoch = epoch
                since_best = 0
                save_checkpoint(
                    net, checkpoint_path, config_hash,
                    extra={"epoch": epoch, "val_dice": val_dice, "train_loss": train_loss},
                )
            else:
                since_best += 1
        else:
            best_epoch = epoch
        if config.target_train_loss is not None and train_loss < config.target_train_loss:
            break
        if val_samples and since_best >= config.early_stop_patience:
            break

    if not val_samples:  # no selection signal; keep the final state
        save_checkpoint(
            net, checkpoint_path, config_hash,
            extra={"epoch": best_epoch, "val_dice": float("nan"),
                   "train_loss": log[-1].train_loss},
        )

    write_training_log(log, out_dir / f"{tag}_log.csv")
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log=log,
        best_val_dice=best_val,
        best_epoch=best_epoch,
        stopped_epoch=log[-1].epoch,
    )


def write_training_log(log: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_dice"])
        for row in log:
            writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss), repr(row.val_dice)])


def cross_validate(
    spec: NetworkSpec,
    config: TrainConfig,
    cases: list[CaseManifest],
    out_dir: str | Path,
    device: str = "cpu",
    config_hash: str = "",
) -> dict:
    """Train one model per fold on a shared patient-level assignment;
    the assignment hash is recorded so architectures can be compared on
    identical splits."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment = make_folds(cases, config.folds, config.seed, config.stratify_by_gs)
    results = {}
    for fold in range(config.folds):
        train_cases = [c for c in cases if assignment[c.case_id] != fold]
        val_cases = [c for c in cases if assignment[c.case_id] == fold]
        res = train_model(
            spec, config, train_cases, val_cases, out_dir, device, config_hash,
            tag=f"fold{fold}",
        )
        results[fold] = {
            "checkpoint": str(res.checkpoint_path),
            "best_val_dice": res.best_val_dice,
            "best_epoch": res.best_epoch,
            "stopped_epoch": res.stopped_epoch,
        }
    summary = {
        "fold_assignment": assignment,
        "fold_assignment_hash": fold_assignment_hash(assignment),
        "folds": results,
    }
    with open(out_dir / "cv_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict_volume(
    net: SegmentationNetwork, image, device: str = "cpu", batch_size: int = 3
) -> np.ndarray:
    """Per-slice probabilities for a whole volume, assembled to (nx, ny, nz)."""
    k = (net.spec.in_channels - 1) // 2
    depth = image.data.shape[2]
    net.eval()
    probs = np.zeros(image.data.shape, dtype=np.float32)
    with torch.no_grad():
        for start in range(0, depth, batch_size):
            idx = list(range(start, min(start + batch_size, depth)))
            x = np.stack([stack_slices(image, i, k) for i in idx]).astype(np.float32)
            out = net(torch.from_numpy(x).to(device))
            main = out.main.cpu().numpy()[:, 0]
            for j, i in enumerate(idx):
                probs[:, :, i] = main[j]
    return probs
