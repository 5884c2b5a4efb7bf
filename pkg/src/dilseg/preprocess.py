"""Geometric standardization, cropping, label cleanup, and channel stacking.

All volumes are brought to a common spacing, cropped in-plane to a
fixed-size region enclosing the prostate, and sliced into multi-channel
2D samples. Crop offsets are recorded in a per-case sidecar so
predictions can be mapped back to the original frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import (
    CaseManifest,
    LabelVolume,
    ScalarVolume,
    load_image,
    load_mask,
    save_volume,
)

DEFAULT_SPACING = (0.625, 0.625, 3.0)


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = DEFAULT_SPACING
    crop_size: tuple[int, int] = (128, 128)
    min_component_voxels: int = 2
    slice_context: int = 2  # k neighbours per side -> 2k+1 channels
    upsample_size: tuple[int, int] = (256, 256)
    normalize: bool = False  # per-volume z-score of intensities
    max_crop_size: int = 1024

    def __post_init__(self):
        for name in ("crop_size", "upsample_size"):
            size = getattr(self, name)
            if any(s <= 0 or s % 2 for s in size):
                raise ValueError(f"{name} must be positive and even, got {size}")
        if self.slice_context < 0:
            raise ValueError("slice_context must be >= 0")

    @property
    def in_channels(self) -> int:
        return 2 * self.slice_context + 1


@dataclass
class CropInfo:
    """Offset of the crop window inside the (resampled) original frame."""

    offset: tuple[int, int]  # (ox, oy), may be negative when padding was added
    crop_size: tuple[int, int]
    original_inplane: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "offset": list(self.offset),
            "crop_size": list(self.crop_size),
            "original_inplane": list(self.original_inplane),
        }

    @staticmethod
    def from_json(d: dict) -> "CropInfo":
        return CropInfo(
            offset=tuple(d["offset"]),
            crop_size=tuple(d["crop_size"]),
            original_inplane=tuple(d["original_inplane"]),
        )


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def resample_volume(vol: ScalarVolume | LabelVolume, target_spacing) -> ScalarVolume | LabelVolume:
    """Resample to ``target_spacing``; trilinear for images, nearest for
    integer label volumes. Physical extent is preserved to within one
    output voxel per axis."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(d == 0 for d in vol.data.shape):
        raise ValueError("cannot resample a zero-extent volume")
    if np.allclose(vol.spacing, target_spacing):
        return vol.with_data(vol.data.copy(), spacing=target_spacing)

    zoom = tuple(s / t for s, t in zip(vol.spacing, target_spacing))
    is_label = isinstance(vol, LabelVolume) and vol.is_integer
    order = 0 if is_label else 1
    out = ndimage.zoom(
        vol.data.astype(vol.data.dtype if is_label else np.float32),
        zoom,
        order=order,
        mode="nearest",
        grid_mode=True,
    )
    return vol.with_data(out, spacing=target_spacing)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def crop_center(case_mask: LabelVolume | None, image: ScalarVolume) -> tuple[int, int]:
    """In-plane crop centre: prostate-mask centroid when available, else
    the image centre."""
    if case_mask is not None and np.any(case_mask.data > 0):
        cx, cy, _ = ndimage.center_of_mass(case_mask.data > 0)
        return int(round(cx)), int(round(cy))
    return image.shape[0] // 2, image.shape[1] // 2


def crop_to_roi(
    vol: ScalarVolume | LabelVolume, center_xy: tuple[int, int], crop_size: tuple[int, int],
    max_crop_size: int = 1024,
) -> tuple[ScalarVolume | LabelVolume, CropInfo]:
    """Crop in-plane around ``center_xy`` to ``crop_size``, zero-padding
    out-of-bounds regions; the offset is recorded for un-cropping."""
    cw, ch = crop_size
    if cw > max_crop_size or ch > max_crop_size:
        raise ValueError(f"crop size {crop_size} exceeds cap {max_crop_size}")
    nx, ny, nz = vol.data.shape
    ox = int(center_xy[0]) - cw // 2
    oy = int(center_xy[1]) - ch // 2
    out = np.zeros((cw, ch, nz), dtype=vol.data.dtype)
    src_x = slice(max(ox, 0), min(ox + cw, nx))
    src_y = slice(max(oy, 0), min(oy + ch, ny))
    dst_x = slice(src_x.start - ox, src_x.stop - ox)
    dst_y = slice(src_y.start - oy, src_y.stop - oy)
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_x, dst_y, :] = vol.data[src_x, src_y, :]
    info = CropInfo(offset=(ox, oy), crop_size=(cw, ch), original_inplane=(nx, ny))
    return vol.with_data(out), info


def uncrop(data: np.ndarray, info: CropInfo) -> np.ndarray:
    """Map cropped data (cw, ch, nz) back to the original in-plane frame,
    zero outside the crop window."""
    cw, ch = info.crop_size
    nx, ny = info.original_inplane
    ox, oy = info.offset
    out = np.zeros((nx, ny) + data.shape[2:], dtype=data.dtype)
    src_x = slice(max(-ox, 0), min(nx - ox, cw))
    src_y = slice(max(-oy, 0), min(ny - oy, ch))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[ox + src_x.start : ox + src_x.stop, oy + src_y.start : oy + src_y.stop] = data[
            src_x, src_y
        ]
    return out


# ---------------------------------------------------------------------------
# Label cleanup
# ---------------------------------------------------------------------------

# 26-connectivity in 3D (8 in 2D): the most inclusive standard structure.
STRUCTURE_3D = np.ones((3, 3, 3), dtype=bool)
STRUCTURE_2D = np.ones((3, 3), dtype=bool)


def clean_small_components(mask: LabelVolume, min_voxels: int = 2) -> LabelVolume:
    """Remove connected foreground components with fewer than ``min_voxels``
    voxels (26-connectivity); all other voxels are unchanged."""
    if not mask.is_integer:
        raise ValueError("clean_small_components requires an integer mask")
    fg = mask.data > 0
    labeled, n = ndimage.label(fg, structure=STRUCTURE_3D)
    if n == 0:
        return mask.with_data(mask.data.copy())
    counts = np.bincount(labeled.ravel())
    small = np.zeros(n + 1, dtype=bool)
    small[1:] = counts[1:] < min_voxels
    out = np.where(small[labeled], 0, mask.data)
    return mask.with_data(out.astype(mask.data.dtype))


# ---------------------------------------------------------------------------
# Slice stacking
# ---------------------------------------------------------------------------


def stack_slices(vol: ScalarVolume, slice_index: int, k: int = 2) -> np.ndarray:
    """(2k+1)-channel 2D sample around ``slice_index``, channels ordered
    inferior to superior; out-of-range neighbours are edge-replicated."""
    depth = vol.data.shape[2]
    if not 0 <= slice_index < depth:
        raise IndexError(f"slice index {slice_index} outside 0..{depth - 1}")
    idx = np.clip(np.arange(slice_index - k, slice_index + k + 1), 0, depth - 1)
    return np.stack([vol.data[:, :, i] for i in idx], axis=0)


# ---------------------------------------------------------------------------
# Label interpolation for the detection-plus-segmentation variants
# ---------------------------------------------------------------------------


def _resize2d(arr: np.ndarray, out_size: tuple[int, int], nearest: bool) -> np.ndarray:
    """Resize with the half-pixel-center convention: output pixel i samples
    source coordinate (i + 0.5) * in/out - 0.5, clamped to the grid."""
    nx, ny = arr.shape
    ox, oy = out_size
    if (nx, ny) == (ox, oy):
        return arr.astype(np.float64, copy=True)
    ux = (np.arange(ox) + 0.5) * (nx / ox) - 0.5
    uy = (np.arange(oy) + 0.5) * (ny / oy) - 0.5
    if nearest:
        ix = np.clip(np.floor(ux + 0.5).astype(int), 0, nx - 1)
        iy = np.clip(np.floor(uy + 0.5).astype(int), 0, ny - 1)
        return arr[np.ix_(ix, iy)].astype(np.float64)
    ux = np.clip(ux, 0, nx - 1)
    uy = np.clip(uy, 0, ny - 1)
    x0 = np.clip(np.floor(ux).astype(int), 0, nx - 1)
    y0 = np.clip(np.floor(uy).astype(int), 0, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = (ux - x0)[:, None]
    fy = (uy - y0)[None, :]
    a = arr.astype(np.float64)
    return (
        a[np.ix_(x0, y0)] * (1 - fx) * (1 - fy)
        + a[np.ix_(x1, y0)] * fx * (1 - fy)
        + a[np.ix_(x0, y1)] * (1 - fx) * fy
        + a[np.ix_(x1, y1)] * fx * fy
    )


def make_smoothed_labels(mask2d: np.ndarray, upsample_size: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample of a binary 2D mask; fractional values appear at
    boundaries, acting as softened training targets."""
    mask2d = np.asarray(mask2d, dtype=np.float64)
    out = _resize2d(mask2d, tuple(upsample_size), nearest=False)
    return np.clip(out, 0.0, 1.0)


def make_binary_labels(mask2d: np.ndarray, upsample_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsample of a binary 2D mask; values stay binary."""
    mask2d = np.asarray(mask2d, dtype=np.float64)
    return _resize2d(mask2d, tuple(upsample_size), nearest=True)


# ---------------------------------------------------------------------------
# Per-case preprocessing
# ---------------------------------------------------------------------------


def preprocess_case(
    case: CaseManifest, config: PreprocessConfig, out_dir: str | Path, config_hash: str = ""
) -> CaseManifest:
    """Resample, crop, clean, and persist one case; returns a manifest entry
    pointing at the preprocessed volumes. A JSON sidecar records the crop
    offset, original spacing, and config hash for exact un-cropping."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    image = load_image(case.image_path)
    mask = load_mask(case.mask_path)
    original_spacing = image.spacing

    image = resample_volume(image, config.target_spacing)
    mask = resample_volume(mask, config.target_spacing)
    mask = clean_small_components(mask, config.min_component_voxels)

    prostate = None
    if case.prostate_mask_path is not None:
        prostate = load_mask(case.prostate_mask_path)
        prostate = resample_volume(prostate, config.target_spacing)

    center = crop_center(prostate, image)
    image_c, info = crop_to_roi(image, center, config.crop_size, config.max_crop_size)
    mask_c, _ = crop_to_roi(mask, center, config.crop_size, config.max_crop_size)
    if config.normalize:
        data = image_c.data.astype(np.float32)
        std = float(data.std())
        image_c = image_c.with_data((data - data.mean()) / (std if std > 0 else 1.0))

    image_path = out_dir / f"{case.case_id}_image.nii.gz"
    mask_path = out_dir / f"{case.case_id}_mask.nii.gz"
    save_volume(image_c, image_path)
    save_volume(mask_c, mask_path)
    prostate_path = None
    if prostate is not None:
        prostate_c, _ = crop_to_roi(prostate, center, config.crop_size, config.max_crop_size)
        prostate_path = out_dir / f"{case.case_id}_prostate.nii.gz"
        save_volume(prostate_c, prostate_path)

    sidecar = {
        "case_id": case.case_id,
        "crop": info.to_json(),
        "original_spacing": list(original_spacing),
        "target_spacing": list(config.target_spacing),
        "normalize": config.normalize,
        "config_hash": config_hash,
    }
    with open(out_dir / f"{case.case_id}_sidecar.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")

    return replace(case, image_path=image_path, mask_path=mask_path, prostate_mask_path=prostate_path)


def load_sidecar(out_dir: str | Path, case_id: str) -> dict:
    with open(Path(out_dir) / f"{case_id}_sidecar.json") as fh:
        return json.load(fh)
