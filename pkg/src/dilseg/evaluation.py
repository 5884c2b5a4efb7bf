"""Lesion-level detection and segmentation scoring.

Predicted components are extracted with 26-connectivity; components whose
volume does not exceed the negligible-volume threshold (0.1 cm^3) are
ignored. Each ground-truth lesion is paired with its best-overlapping
retained component and counts as detected only when their Dice overlap
strictly exceeds 0.1. A single predicted component may serve as the
detection for several ground-truth lesions when it is each one's best
overlap (a greedy one-to-one matcher is available behind a flag).
Retained components that are nobody's detection are false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .preprocess import STRUCTURE_3D
from .volumes import LabelVolume

DSC_DETECTION_THRESHOLD = 0.1  # overlap must strictly exceed this
MIN_LESION_VOLUME_CC = 0.1  # components must strictly exceed this


class MatchStatus(str, Enum):
    TRUE_POSITIVE = "TRUE_POSITIVE"
    FALSE_NEGATIVE = "FALSE_NEGATIVE"
    FALSE_POSITIVE = "FALSE_POSITIVE"
    IGNORED_SMALL = "IGNORED_SMALL"


@dataclass
class PredComponent:
    component_id: int
    voxels: int
    volume_cc: float
    retained: bool


@dataclass
class LesionMatch:
    status: MatchStatus
    gt_lesion_id: int | None = None
    pred_component_id: int | None = None
    dsc: float = 0.0


@dataclass
class CaseEvaluation:
    case_id: str
    matches: list[LesionMatch]
    lesion_dsc: dict[int, float]  # per ground-truth lesion
    fp_count: int
    out_of_gland_fp_count: int | None = None

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "matches": [
                {
                    "status": m.status.value,
                    "gt_lesion_id": m.gt_lesion_id,
                    "pred_component_id": m.pred_component_id,
                    "dsc": m.dsc,
                }
                for m in self.matches
            ],
            "lesion_dsc": {str(k): v for k, v in self.lesion_dsc.items()},
            "fp_count": self.fp_count,
            "out_of_gland_fp_count": self.out_of_gland_fp_count,
        }


def extract_lesions(
    pred_mask: np.ndarray, spacing: tuple[float, float, float],
    min_volume_cc: float = MIN_LESION_VOLUME_CC,
) -> tuple[np.ndarray, list[PredComponent]]:
    """Label 26-connected components of a binary prediction; components are
    retained only when their volume strictly exceeds ``min_volume_cc``."""
    labeled, n = ndimage.label(np.asarray(pred_mask) > 0, structure=STRUCTURE_3D)
    voxel_cc = float(np.prod(spacing)) / 1000.0
    components = []
    counts = np.bincount(labeled.ravel())
    for cid in range(1, n + 1):
        vol = counts[cid] * voxel_cc
        components.append(
            PredComponent(
                component_id=cid,
                voxels=int(counts[cid]),
                volume_cc=float(vol),
                retained=bool(vol > min_volume_cc),
            )
        )
    return labeled, components


def lesion_dsc(gt_region: np.ndarray, pred_region: np.ndarray) -> float:
    """Voxel Dice between two regions on the same grid; 1.0 when both are
    empty (degenerate, excluded from lesion-level aggregation)."""
    gt_region = np.asarray(gt_region, dtype=bool)
    pred_region = np.asarray(pred_region, dtype=bool)
    if gt_region.shape != pred_region.shape:
        raise ValueError(f"grid mismatch: {gt_region.shape} vs {pred_region.shape}")
    denom = int(gt_region.sum()) + int(pred_region.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(gt_region, pred_region).sum()) / denom


def match_lesions(
    gt_labeled: np.ndarray,
    gt_ids: list[int],
    pred_labeled: np.ndarray,
    components: list[PredComponent],
    dsc_threshold: float = DSC_DETECTION_THRESHOLD,
    one_to_one: bool = False,
) -> list[LesionMatch]:
    """Pair ground-truth lesions with retained predicted components."""
    if gt_labeled.shape != pred_labeled.shape:
        raise ValueError("ground truth and prediction are on different grids")
    retained = {c.component_id for c in components if c.retained}
    matches: list[LesionMatch] = []

    # Overlap-derived DSC for every (gt, retained component) pair that shares voxels.
    pair_dsc: dict[tuple[int, int], float] = {}
    gt_sizes = {g: int(np.sum(gt_labeled == g)) for g in gt_ids}
    comp_sizes = {c.component_id: c.voxels for c in components}
    for g in gt_ids:
        overlapping = np.unique(pred_labeled[gt_labeled == g])
        for p in overlapping:
            p = int(p)
            if p == 0 or p not in retained:
                continue
            inter = int(np.sum((gt_labeled == g) & (pred_labeled == p)))
            pair_dsc[(g, p)] = 2.0 * inter / (gt_sizes[g] + comp_sizes[p])

    detecting: set[int] = set()
    if one_to_one:
        order = sorted(pair_dsc.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
        used_gt: set[int] = set()
        assigned: dict[int, tuple[int, float]] = {}
        for (g, p), d in order:
            if d <= dsc_threshold or g in used_gt or p in detecting:
                continue
            used_gt.add(g)
            detecting.add(p)
            assigned[g] = (p, d)
        for g in sorted(gt_ids):
            if g in assigned:
                p, d = assigned[g]
                matches.append(LesionMatch(MatchStatus.TRUE_POSITIVE, g, p, d))
            else:
                best = max((d for (gg, _), d in pair_dsc.items() if gg == g), default=0.0)
                matches.append(LesionMatch(MatchStatus.FALSE_NEGATIVE, g, None, best))
    else:
        for g in sorted(gt_ids):
            cands = [(p, d) for (gg, p), d in pair_dsc.items() if gg == g]
            if not cands:
                matches.append(LesionMatch(MatchStatus.FALSE_NEGATIVE, g, None, 0.0))
                continue
            # Best component: highest DSC, ties broken by smaller id.
            p, d = min(cands, key=lambda pd: (-pd[1], pd[0]))
            if d > dsc_threshold:
                detecting.add(p)
                matches.append(LesionMatch(MatchStatus.TRUE_POSITIVE, g, p, d))
            else:
                matches.append(LesionMatch(MatchStatus.FALSE_NEGATIVE, g, None, d))

    for comp in components:
        if not comp.retained:
            matches.append(
                LesionMatch(MatchStatus.IGNORED_SMALL, None, comp.component_id, 0.0)
            )
        elif comp.component_id not in detecting:
            best = max(
                (d for (_, p), d in pair_dsc.items() if p == comp.component_id), default=0.0
            )
            matches.append(
                LesionMatch(MatchStatus.FALSE_POSITIVE, None, comp.component_id, best)
            )
    return matches


@dataclass
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    f1: float
    recall_defined: bool = True
    precision_defined: bool = True
    f1_defined: bool = True


def f1_score(precision: float, recall: float) -> float:
    """Balanced F-measure; 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def detection_metrics(matches: list[LesionMatch]) -> DetectionMetrics:
    """Recall, precision, and F1 over aggregated matches; undefined
    denominators yield 0 with the corresponding flag cleared."""
    tp = sum(1 for m in matches if m.status == MatchStatus.TRUE_POSITIVE)
    fp = sum(1 for m in matches if m.status == MatchStatus.FALSE_POSITIVE)
    fn = sum(1 for m in matches if m.status == MatchStatus.FALSE_NEGATIVE)
    p = tp + fn
    recall_defined = p > 0
    precision_defined = (tp + fp) > 0
    recall = tp / p if recall_defined else 0.0
    precision = tp / (tp + fp) if precision_defined else 0.0
    f1_defined = (precision + recall) > 0
    return DetectionMetrics(
        tp=tp,
        fp=fp,
        fn=fn,
        recall=recall,
        precision=precision,
        f1=f1_score(precision, recall),
        recall_defined=recall_defined,
        precision_defined=precision_defined,
        f1_defined=f1_defined,
    )


def false_positives_per_lesion(matches: list[LesionMatch]) -> float:
    """False-positive count divided by the number of ground-truth lesions."""
    n_gt = sum(
        1 for m in matches
        if m.status in (MatchStatus.TRUE_POSITIVE, MatchStatus.FALSE_NEGATIVE)
    )
    if n_gt == 0:
        raise ValueError("false positives per lesion undefined with zero ground-truth lesions")
    fp = sum(1 for m in matches if m.status == MatchStatus.FALSE_POSITIVE)
    return fp / n_gt


def out_of_gland_detections(
    matches: list[LesionMatch], pred_labeled: np.ndarray, prostate_mask: np.ndarray
) -> int:
    """False-positive components whose centroid (nearest voxel) lies outside
    the prostate mask."""
    prostate = np.asarray(prostate_mask) > 0
    count = 0
    for m in matches:
        if m.status != MatchStatus.FALSE_POSITIVE:
            continue
        com = ndimage.center_of_mass(pred_labeled == m.pred_component_id)
        idx = tuple(
            int(np.clip(round(c), 0, s - 1)) for c, s in zip(com, prostate.shape)
        )
        if not prostate[idx]:
            count += 1
    return count


def evaluate_case(
    case_id: str,
    gt_mask: LabelVolume,
    pred_mask: np.ndarray,
    prostate_mask: LabelVolume | None = None,
    one_to_one: bool = False,
) -> CaseEvaluation:
    """Score one case: component extraction, matching, per-lesion DSC, and
    optional out-of-gland false-detection counting."""
    pred_labeled, components = extract_lesions(pred_mask, gt_mask.spacing)
    gt_ids = gt_mask.lesion_ids()
    matches = match_lesions(
        gt_mask.data.astype(int), gt_ids, pred_labeled, components, one_to_one=one_to_one
    )
    lesion_dsc_map = {
        m.gt_lesion_id: m.dsc for m in matches if m.gt_lesion_id is not None
    }
    fp_count = sum(1 for m in matches if m.status == MatchStatus.FALSE_POSITIVE)
    oog = None
    if prostate_mask is not None:
        oog = out_of_gland_detections(matches, pred_labeled, prostate_mask.data)
    return CaseEvaluation(
        case_id=case_id,
        matches=matches,
        lesion_dsc=lesion_dsc_map,
        fp_count=fp_count,
        out_of_gland_fp_count=oog,
    )


@dataclass
class DatasetEvaluation:
    cases: list[CaseEvaluation] = field(default_factory=list)

    def all_matches(self) -> list[LesionMatch]:
        return [m for case in self.cases for m in case.matches]

    def metrics(self) -> DetectionMetrics:
        return detection_metrics(self.all_matches())

    def lesion_dsc_values(self) -> list[float]:
        return [d for case in self.cases for d in case.lesion_dsc.values()]

    def save_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump([case.to_json() for case in self.cases], fh, indent=2)
            fh.write("\n")


def load_dataset_evaluation(path: str | Path) -> DatasetEvaluation:
    with open(path) as fh:
        entries = json.load(fh)
    cases = []
    for e in entries:
        matches = [
            LesionMatch(
                status=MatchStatus(m["status"]),
                gt_lesion_id=m["gt_lesion_id"],
                pred_component_id=m["pred_component_id"],
                dsc=m["dsc"],
            )
            for m in e["matches"]
        ]
        cases.append(
            CaseEvaluation(
                case_id=e["case_id"],
                matches=matches,
                lesion_dsc={int(k): v for k, v in e["lesion_dsc"].items()},
                fp_count=e["fp_count"],
                out_of_gland_fp_count=e.get("out_of_gland_fp_count"),
            )
        )
    return DatasetEvaluation(cases=cases)
