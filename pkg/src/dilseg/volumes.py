"""Volume data model, file I/O, and dataset manifest ingestion.

Volumes are 3D arrays indexed (x, y, z) with axial slices along the last
axis. Files are NIfTI-1 (``.nii`` / ``.nii.gz``) or an ``.npz`` fallback
that needs no image-format code at all. Loaded volumes are reoriented to
a canonical axis order so downstream code can assume axis-aligned
geometry; volumes are treated as immutable after load.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import nifti


class VolumeError(ValueError):
    """Rejected volume file: malformed header or invalid voxel content."""


class ManifestError(ValueError):
    """Manifest schema violation or lesion/mask mismatch."""


class Zone(str, Enum):
    PZ = "PZ"
    TZ = "TZ"
    AS = "AS"
    OTHER = "OTHER"
    UNLABELED = "UNLABELED"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


def _check_geometry(data: np.ndarray, spacing, direction: np.ndarray) -> None:
    if data.ndim != 3:
        raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeError(f"spacing components must be strictly positive, got {spacing}")
    if direction.shape != (3, 3):
        raise VolumeError(f"direction must be a 3x3 matrix, got {direction.shape}")


@dataclass
class ScalarVolume:
    """3D grid of real intensities (ADC in 1e-6 mm^2/s) with physical geometry."""

    data: np.ndarray  # (nx, ny, nz)
    spacing: tuple[float, float, float]  # mm
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        _check_geometry(self.data, self.spacing, self.direction)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])

    def with_data(self, data: np.ndarray, spacing=None) -> "ScalarVolume":
        return replace(self, data=data, spacing=spacing or self.spacing)

    def same_geometry(self, other: "ScalarVolume | LabelVolume") -> bool:
        return (
            self.data.shape == other.data.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
            and np.allclose(self.direction, other.direction)
        )


@dataclass
class LabelVolume(ScalarVolume):
    """Label grid on the same geometry: integer lesion ids, or real values
    in [0, 1] for probability maps and smoothed labels."""

    def __post_init__(self):
        super().__post_init__()
        validate_label_values(self.data)

    @property
    def is_integer(self) -> bool:
        return bool(np.all(self.data == np.round(self.data)))

    def lesion_ids(self) -> list[int]:
        if not self.is_integer:
            raise VolumeError("lesion ids are only defined for integer label volumes")
        ids = np.unique(self.data)
        return [int(v) for v in ids if v > 0]


def validate_label_values(data: np.ndarray) -> None:
    """Labels must be non-negative integers (ids) or reals in [0, 1]."""
    if np.isnan(data).any() or np.isinf(data).any():
        bad = int(np.isnan(data).sum() + np.isinf(data).sum())
        raise VolumeError(f"label volume contains {bad} NaN/Inf voxels")
    lo, hi = float(data.min()), float(data.max())
    if 0.0 <= lo and hi <= 1.0:
        return
    if lo < 0:
        raise VolumeError(f"negative label value {lo}")
    if not np.all(data == np.round(data)):
        offenders = data[data != np.round(data)]
        raise VolumeError(f"non-integer label value {float(offenders.flat[0])}")


# ---------------------------------------------------------------------------
# Canonical orientation
# ---------------------------------------------------------------------------


def _affine_to_canonical(data: np.ndarray, affine: np.ndarray):
    """Reorder/flip voxel axes so the affine is axis-aligned with positive
    spacing; returns (data, spacing, origin, direction)."""
    mat = affine[:3, :3].astype(float)
    # Dominant world axis for each voxel axis.
    perm = []
    for j in range(3):
        col = np.abs(mat[:, j])
        cand = int(np.argmax(col))
        while cand in perm:  # degenerate header; fall back to free axis
            col[cand] = -1
            cand = int(np.argmax(col))
        perm.append(cand)
    inv_perm = [perm.index(i) for i in range(3)]
    data = np.transpose(data, inv_perm)
    mat = mat[:, inv_perm]
    origin = affine[:3, 3].copy()
    for i in range(3):
        if mat[i, i] < 0:
            data = np.flip(data, axis=i)
            origin = origin + mat[:, i] * (data.shape[i] - 1)
            mat[:, i] = -mat[:, i]
    spacing = np.linalg.norm(mat, axis=0)
    direction = mat / spacing
    return np.ascontiguousarray(data), tuple(spacing), tuple(origin), direction


def _volume_affine(vol: ScalarVolume) -> np.ndarray:
    affine = np.eye(4)
    affine[:3, :3] = vol.direction * np.asarray(vol.spacing)
    affine[:3, 3] = vol.origin
    return affine


# ---------------------------------------------------------------------------
# Load / save
# ---------------------------------------------------------------------------


def _read_any(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if path.suffix == ".npz":
        if not path.exists():
            raise FileNotFoundError(f"volume file not found: {path}")
        with np.load(path) as npz:
            data = npz["data"]
            affine = np.eye(4)
            affine[:3, :3] = npz["direction"] * npz["spacing"]
            affine[:3, 3] = npz["origin"]
        return data, affine
    try:
        return nifti.read_nifti(path)
    except nifti.NiftiError as exc:
        raise VolumeError(str(exc)) from exc


def load_image(path: str | Path) -> ScalarVolume:
    """Load an intensity volume; NaN/Inf voxels are warned about and zeroed."""
    data, affine = _read_any(Path(path))
    data, spacing, origin, direction = _affine_to_canonical(data, affine)
    bad = ~np.isfinite(data)
    if bad.any():
        warnings.warn(
            f"{path}: {int(bad.sum())} NaN/Inf voxels replaced with 0", stacklevel=2
        )
        data = np.where(bad, 0, data)
    return ScalarVolume(data=data, spacing=spacing, origin=origin, direction=direction)


def load_mask(path: str | Path) -> LabelVolume:
    """Load a label volume; NaN/Inf or non-integer label values reject the load."""
    data, affine = _read_any(Path(path))
    data, spacing, origin, direction = _affine_to_canonical(data, affine)
    try:
        return LabelVolume(data=data, spacing=spacing, origin=origin, direction=direction)
    except VolumeError as exc:
        raise VolumeError(f"{path}: {exc}") from exc


def load_volume(path: str | Path, kind: str = "image") -> ScalarVolume | LabelVolume:
    """Load a volume as ``kind`` in {"image", "mask"}."""
    if kind == "image":
        return load_image(path)
    if kind == "mask":
        return load_mask(path)
    raise ValueError(f"unknown volume kind {kind!r}")


def save_volume(vol: ScalarVolume, path: str | Path) -> None:
    """Write a volume; format chosen by extension (.nii, .nii.gz, .npz)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npz":
        np.savez(
            path,
            data=vol.data,
            spacing=np.asarray(vol.spacing),
            origin=np.asarray(vol.origin),
            direction=vol.direction,
        )
    else:
        nifti.write_nifti(path, vol.data, _volume_affine(vol))


# ---------------------------------------------------------------------------
# Lesion records and manifests
# ---------------------------------------------------------------------------


@dataclass
class LesionRecord:
    """One annotated lesion tied to a mask label id."""

    lesion_id: int
    gleason_primary: int | None = None
    gleason_secondary: int | None = None
    zone: Zone = Zone.UNLABELED
    volume_cc: float | None = None

    def __post_init__(self):
        if (self.gleason_primary is None) != (self.gleason_secondary is None):
            raise ManifestError(
                f"lesion {self.lesion_id}: Gleason components must both be present or both absent"
            )
        if self.gleason_primary is not None:
            for g in (self.gleason_primary, self.gleason_secondary):
                if g not in (3, 4, 5):
                    raise ManifestError(f"lesion {self.lesion_id}: Gleason component {g} not in 3..5")

    @property
    def gleason_sum(self) -> int | None:
        if self.gleason_primary is None:
            return None
        return self.gleason_primary + self.gleason_secondary

    def gleason_string(self) -> str | None:
        if self.gleason_primary is None:
            return None
        return f"{self.gleason_primary}+{self.gleason_secondary}"


def parse_gleason(text: str | None) -> tuple[int | None, int | None]:
    """Parse a "primary+secondary" Gleason string; None stays (None, None)."""
    if text is None or text == "":
        return None, None
    parts = text.split("+")
    if len(parts) != 2:
        raise ManifestError(f"bad gleason string {text!r}, expected 'p+s'")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ManifestError(f"bad gleason string {text!r}") from exc


@dataclass
class CaseManifest:
    """Paths and lesion annotations for one patient case."""

    case_id: str
    image_path: Path
    mask_path: Path
    prostate_mask_path: Path | None = None
    lesions: list[LesionRecord] = field(default_factory=list)
    fold: int | None = None
    split: Split = Split.TRAIN

    def lesion(self, lesion_id: int) -> LesionRecord:
        for rec in self.lesions:
            if rec.lesion_id == lesion_id:
                return rec
        raise KeyError(f"case {self.case_id}: no lesion record with id {lesion_id}")


def lesion_volume_cc(mask: LabelVolume, lesion_id: int) -> float:
    """Volume in cm^3 of the mask region carrying ``lesion_id``."""
    count = int(np.sum(mask.data == lesion_id))
    if count == 0:
        raise ValueError(f"lesion id {lesion_id} absent from mask")
    return count * mask.voxel_volume_mm3 / 1000.0


def _case_from_json(entry: dict, base_dir: Path) -> CaseManifest:
    required = {"case_id", "image", "mask"}
    missing = required - set(entry)
    if missing:
        raise ManifestError(f"manifest entry missing keys {sorted(missing)}: {entry}")
    lesions = []
    for lm in entry.get("lesions", []):
        gp, gs = parse_gleason(lm.get("gleason"))
        zone = Zone(lm["zone"]) if lm.get("zone") else Zone.UNLABELED
        lesions.append(
            LesionRecord(
                lesion_id=int(lm["id"]), gleason_primary=gp, gleason_secondary=gs, zone=zone
            )
        )
    fold = entry.get("fold")
    if fold is not None and not 0 <= int(fold) <= 4:
        raise ManifestError(f"case {entry['case_id']}: fold {fold} outside 0..4")
    prostate = entry.get("prostate_mask")

    def _resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base_dir / path

    return CaseManifest(
        case_id=str(entry["case_id"]),
        image_path=_resolve(entry["image"]),
        mask_path=_resolve(entry["mask"]),
        prostate_mask_path=_resolve(prostate) if prostate else None,
        lesions=lesions,
        fold=int(fold) if fold is not None else None,
        split=Split(entry.get("split", "TRAIN")),
    )


def validate_case(case: CaseManifest) -> list[str]:
    """Check lesion records against the mask; returns per-case problems."""
    problems = []
    try:
        mask = load_mask(case.mask_path)
    except (VolumeError, FileNotFoundError) as exc:
        return [f"case {case.case_id}: {exc}"]
    mask_ids = set(mask.lesion_ids())
    record_ids = {rec.lesion_id for rec in case.lesions}
    for lid in sorted(record_ids - mask_ids):
        problems.append(f"case {case.case_id}: lesion id {lid} absent from mask")
    for lid in sorted(mask_ids - record_ids):
        problems.append(f"case {case.case_id}: mask label {lid} has no lesion record")
    for rec in case.lesions:
        if rec.lesion_id in mask_ids:
            rec.volume_cc = lesion_volume_cc(mask, rec.lesion_id)
    return problems


def load_manifest(path: str | Path, validate: bool = True) -> list[CaseManifest]:
    """Load a JSON manifest; with ``validate`` every case is checked against
    its mask and all problems are raised together."""
    path = Path(path)
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ManifestError(f"{path}: manifest must be a JSON array of cases")
    cases = [_case_from_json(entry, path.parent) for entry in entries]
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate case ids")
    if validate:
        problems = []
        for case in cases:
            problems.extend(validate_case(case))
        if problems:
            raise ManifestError("manifest validation failed:\n" + "\n".join(problems))
    return cases


def save_manifest(cases: list[CaseManifest], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def _rel(p: Path | None) -> str | None:
        if p is None:
            return None
        try:
            return str(Path(p).relative_to(path.parent))
        except ValueError:
            return str(p)

    entries = []
    for case in cases:
        entry = {
            "case_id": case.case_id,
            "image": _rel(case.image_path),
            "mask": _rel(case.mask_path),
            "lesions": [
                {"id": rec.lesion_id, "gleason": rec.gleason_string(), "zone": rec.zone.value}
                for rec in case.lesions
            ],
            "split": case.split.value,
        }
        if case.prostate_mask_path is not None:
            entry["prostate_mask"] = _rel(case.prostate_mask_path)
        if case.fold is not None:
            entry["fold"] = case.fold
        entries.append(entry)
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2)
        fh.write("\n")


def scan_prostatex_layout(root: str | Path) -> list[CaseManifest]:
    """Map the public prostate MR annotation layout to a manifest.

    Expected layout::

        root/
          images/<case_id>.nii.gz      (or .nii / .npz)
          masks/<case_id>.nii.gz
          prostate_masks/<case_id>.nii.gz   (optional)
          lesions.csv                       (optional: case_id,lesion_id,gleason,zone)

    Lesions missing from ``lesions.csv`` get UNLABELED zone and no Gleason
    score, mirroring the sub-clinical findings of the public release.
    """
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise ManifestError(f"{root}: expected images/ and masks/ subdirectories")

    meta: dict[str, dict[int, tuple[str | None, str | None]]] = {}
    csv_path = root / "lesions.csv"
    if csv_path.exists():
        import csv

        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                cid = row["case_id"]
                meta.setdefault(cid, {})[int(row["lesion_id"])] = (
                    row.get("gleason") or None,
                    row.get("zone") or None,
                )

    cases = []
    for image_path in sorted(image_dir.iterdir()):
        name = image_path.name
        case_id = name.split(".")[0]
        mask_path = mask_dir / name
        if not mask_path.exists():
            raise ManifestError(f"{root}: no mask for image {name}")
        mask = load_mask(mask_path)
        lesions = []
        for lid in mask.lesion_ids():
            gleason, zone = meta.get(case_id, {}).get(lid, (None, None))
            gp, gs = parse_gleason(gleason)
            lesions.append(
                LesionRecord(
                    lesion_id=lid,
                    gleason_primary=gp,
                    gleason_secondary=gs,
                    zone=Zone(zone) if zone else Zone.UNLABELED,
                    volume_cc=lesion_volume_cc(mask, lid),
                )
            )
        prostate = root / "prostate_masks" / name
        cases.append(
            CaseManifest(
                case_id=case_id,
                image_path=image_path,
                mask_path=mask_path,
                prostate_mask_path=prostate if prostate.exists() else None,
                lesions=lesions,
                split=Split.TEST,
            )
        )
    return cases
