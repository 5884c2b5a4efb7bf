"""Synthetic ADC phantom generator.

Ellipsoidal gland with darker ellipsoidal lesions on a known grid, so
every downstream stage can be verified against analytic ground truth
(lesions show the reduced diffusivity that makes cancer visible on ADC).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volumes import (
    CaseManifest,
    LabelVolume,
    LesionRecord,
    ScalarVolume,
    Split,
    Zone,
    lesion_volume_cc,
    save_manifest,
    save_volume,
)


class PlacementError(RuntimeError):
    """Could not place the requested lesions inside the gland."""


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (128, 128, 20)
    spacing: tuple[float, float, float] = (0.625, 0.625, 3.0)
    gland_semiaxes_mm: tuple[float, float, float] = (30.0, 26.0, 24.0)
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (4.5, 8.0)
    radius_jitter: float = 0.2  # per-axis semi-axis jitter fraction
    gland_adc: float = 1400.0
    lesion_adc: float = 700.0
    background_adc: float = 2000.0
    noise_sigma: float = 100.0
    min_separation_mm: float = 4.0  # keeps lesions from merging into one component
    pz_shell: float = 0.55  # normalized gland radius beyond which a lesion is PZ
    gleason_choices: tuple[tuple[int, int], ...] = ((3, 3), (3, 4), (4, 3), (4, 4), (4, 5))
    gleason_weights: tuple[float, ...] = (0.2, 0.45, 0.2, 0.1, 0.05)
    max_placement_tries: int = 200
    write_prostate_mask: bool = True

    def __post_init__(self):
        if self.lesion_adc >= self.gland_adc:
            raise ValueError("lesion ADC must be below gland ADC")
        if min(self.lesion_radius_mm) <= 0:
            raise ValueError("lesion radii must be positive")


def _voxel_centers_mm(shape, spacing):
    """Voxel-centre coordinates relative to the volume centre, one axis each."""
    return [
        (np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(shape, spacing)
    ]


def _ellipsoid_mask(shape, spacing, center_mm, semiaxes_mm) -> np.ndarray:
    ax = _voxel_centers_mm(shape, spacing)
    terms = [
        ((ax[i] - center_mm[i]) / semiaxes_mm[i]) ** 2 for i in range(3)
    ]
    return terms[0][:, None, None] + terms[1][None, :, None] + terms[2][None, None, :] <= 1.0


def generate_case(
    config: PhantomConfig, rng: np.random.Generator
) -> tuple[ScalarVolume, LabelVolume, list[LesionRecord]]:
    """One synthetic case: gland at mid ADC, darker lesions with integer ids,
    additive Gaussian noise, lesion records with synthetic grade and zone."""
    shape, spacing = config.shape, config.spacing
    gland = _ellipsoid_mask(shape, spacing, (0.0, 0.0, 0.0), config.gland_semiaxes_mm)

    n_lesions = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1))
    labels = np.zeros(shape, dtype=np.int16)
    records: list[LesionRecord] = []
    semi = np.asarray(config.gland_semiaxes_mm)

    for lesion_id in range(1, n_lesions + 1):
        placed = False
        for _ in range(config.max_placement_tries):
            radius = rng.uniform(*config.lesion_radius_mm)
            axes = radius * (1.0 + rng.uniform(-config.radius_jitter, config.radius_jitter, 3))
            # Cap the centre's normalized gland radius so the lesion fits inside.
            margin = 1.0 - float(np.max(axes / semi))
            if margin <= 0:
                continue
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            rho = margin * rng.uniform(0.0, 1.0) ** (1 / 3)
            center = rho * direction * semi
            lesion = _ellipsoid_mask(shape, spacing, center, axes)
            if not lesion.any():
                continue
            padded = _ellipsoid_mask(shape, spacing, center, axes + config.min_separation_mm)
            if np.any(labels[padded] != 0) or not np.all(gland[lesion]):
                continue
            labels[lesion] = lesion_id
            gp, gs = config.gleason_choices[
                rng.choice(len(config.gleason_choices), p=np.asarray(config.gleason_weights))
            ]
            zone = Zone.PZ if rho > config.pz_shell else Zone.TZ
            records.append(
                LesionRecord(lesion_id=lesion_id, gleason_primary=gp, gleason_secondary=gs, zone=zone)
            )
            placed = True
            break
        if not placed:
            if lesion_id > config.lesion_count[0]:
                break  # sampled count was ambitious; the minimum is satisfied
            raise PlacementError(
                f"could not place lesion {lesion_id} after {config.max_placement_tries} tries"
            )

    image = np.full(shape, config.background_adc, dtype=np.float32)
    image[gland] = config.gland_adc
    image[labels > 0] = config.lesion_adc
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, shape).astype(np.float32)

    scalar = ScalarVolume(data=image, spacing=spacing)
    mask = LabelVolume(data=labels, spacing=spacing)
    for rec in records:
        rec.volume_cc = lesion_volume_cc(mask, rec.lesion_id)
    return scalar, mask, records


@dataclass
class PhantomCase:
    image: ScalarVolume
    mask: LabelVolume
    prostate: LabelVolume
    records: list[LesionRecord] = field(default_factory=list)


def generate_dataset(
    config: PhantomConfig,
    n_cases: int,
    seed: int,
    out_dir: str | Path,
    file_format: str = "nii.gz",
) -> Path:
    """Write ``n_cases`` phantom cases plus a manifest consumable by the
    rest of the pipeline; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    child_seeds = np.random.SeedSequence(seed).spawn(n_cases)

    cases = []
    for i, ss in enumerate(child_seeds):
        rng = np.random.default_rng(ss)
        image, mask, records = generate_case(config, rng)
        case_id = f"phantom_{i:03d}"
        image_path = out_dir / f"{case_id}_image.{file_format}"
        mask_path = out_dir / f"{case_id}_mask.{file_format}"
        save_volume(image, image_path)
        save_volume(mask, mask_path)
        prostate_path = None
        if config.write_prostate_mask:
            gland = _ellipsoid_mask(config.shape, config.spacing, (0, 0, 0), config.gland_semiaxes_mm)
            prostate_path = out_dir / f"{case_id}_prostate.{file_format}"
            save_volume(
                LabelVolume(data=gland.astype(np.uint8), spacing=config.spacing), prostate_path
            )
        cases.append(
            CaseManifest(
                case_id=case_id,
                image_path=image_path,
                mask_path=mask_path,
                prostate_mask_path=prostate_path,
                lesions=records,
                split=Split.TRAIN,
            )
        )
    manifest_path = out_dir / "manifest.json"
    save_manifest(cases, manifest_path)
    return manifest_path
