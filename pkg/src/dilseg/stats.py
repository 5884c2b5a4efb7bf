"""Nonparametric comparison machinery and lesion-group disaggregation.

Signed-rank and rank-sum tests have an exact small-sample path (dynamic
programming over the permutation distribution, ties handled with average
ranks) and a tie-corrected normal approximation above it. Effect sizes
are matched rank-biserial coefficients; correlation is Spearman's rho.
Zero paired differences are dropped before the signed-rank test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.stats import rankdata
from scipy.special import stdtr

from .evaluation import DatasetEvaluation
from .volumes import CaseManifest, Zone

EXACT_SIGNED_RANK_MAX_N = 25
EXACT_RANK_SUM_MAX_N = 30
SIGNIFICANCE_LEVEL = 0.05


class TestKind(str, Enum):
    SIGNED_RANK = "SIGNED_RANK"
    RANK_SUM = "RANK_SUM"
    SPEARMAN = "SPEARMAN"


@dataclass
class StatResult:
    p_value: float
    effect_size: float
    n: int
    test: TestKind
    method: str = "exact"  # or "approx"

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0 + 1e-12:
            raise ValueError(f"invalid p-value {self.p_value}")
        if not -1.0 - 1e-12 <= self.effect_size <= 1.0 + 1e-12:
            raise ValueError(f"invalid effect size {self.effect_size}")


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _scaled_ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks doubled so tied ranks become exact integers."""
    ranks = rankdata(values, method="average") * 2.0
    out = np.rint(ranks).astype(np.int64)
    if not np.allclose(ranks, out):
        raise AssertionError("scaled ranks expected to be integral")
    return out


def _drop_zeros(differences) -> np.ndarray:
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero")
    return d


def rank_biserial(differences) -> float:
    """(W+ - W-) / (n(n+1)/2) over nonzero differences."""
    d = _drop_zeros(differences)
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    n = d.size
    return (w_plus - w_minus) / (n * (n + 1) / 2.0)


def _signed_rank_exact_p(scaled: np.ndarray, w_plus2: int) -> float:
    """Two-sided exact p over all 2^n sign assignments, as the probability
    of a W+ at least as far from its null mean as observed."""
    total = int(scaled.sum())
    # ways[s] = number of sign vectors with scaled W+ == s.
    ways = np.zeros(total + 1, dtype=np.float64)
    ways[0] = 1.0
    for r in scaled:
        shifted = np.zeros_like(ways)
        shifted[r:] = ways[: total + 1 - r]
        ways = ways + shifted
    # Symmetric statistic 2*W+ - total is integer-valued.
    dev = abs(2 * w_plus2 - total)
    support = 2 * np.arange(total + 1) - total
    mass = ways[np.abs(support) >= dev].sum()
    return float(mass / 2.0**scaled.size)


def wilcoxon_signed_rank(differences) -> StatResult:
    """Two-sided paired signed-rank test; zeros dropped, average ranks for
    ties; exact for n <= 25, tie-corrected normal approximation above."""
    d = _drop_zeros(differences)
    n = d.size
    scaled = _scaled_ranks(np.abs(d))
    w_plus2 = int(scaled[d > 0].sum())
    effect = rank_biserial(d)

    if n <= EXACT_SIGNED_RANK_MAX_N:
        p = _signed_rank_exact_p(scaled, w_plus2)
        method = "exact"
    else:
        w_plus = w_plus2 / 2.0
        mean = n * (n + 1) / 4.0
        _, counts = np.unique(scaled, return_counts=True)
        tie_term = float(((counts**3 - counts)).sum()) / 48.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        if var <= 0:
            raise ValueError("degenerate signed-rank variance (all ranks tied to zero)")
        # Continuity-corrected z.
        dev = max(abs(w_plus - mean) - 0.5, 0.0)
        z = dev / math.sqrt(var)
        p = min(1.0, 2.0 * _norm_sf(z))
        method = "approx"
    return StatResult(p_value=p, effect_size=effect, n=n, test=TestKind.SIGNED_RANK, method=method)


def _rank_sum_distribution(scaled: np.ndarray, n1: int) -> np.ndarray:
    """ways[s] = number of n1-subsets of the scaled ranks with sum s."""
    total = int(scaled.sum())
    ways = np.zeros((n1 + 1, total + 1), dtype=np.float64)
    ways[0, 0] = 1.0
    for r in scaled:
        for size in range(min(n1, 1_000_000), 0, -1):
            ways[size, r:] += ways[size - 1, : total + 1 - r]
    return ways[n1]


def wilcoxon_rank_sum(sample_a, sample_b) -> StatResult:
    """Two-sided unpaired rank-sum test; exact (full enumeration of rank
    splits) when n_a + n_b <= 30, tie-corrected normal approximation above."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    scaled = _scaled_ranks(pooled)
    w2 = int(scaled[:n1].sum())
    ranks = scaled / 2.0
    # Rank-biserial effect for unpaired samples: 2 * (U / (n1 n2)) - 1.
    u = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    effect = 2.0 * u / (n1 * n2) - 1.0

    if n1 + n2 <= EXACT_RANK_SUM_MAX_N:
        dist = _rank_sum_distribution(scaled, n1)
        support = np.arange(dist.size)
        mean2 = n1 * float(scaled.sum()) / (n1 + n2)
        dev = abs(w2 - mean2)
        mass = dist[np.abs(support - mean2) >= dev - 1e-9].sum()
        p = float(mass / math.comb(n1 + n2, n1))
        method = "exact"
    else:
        n = n1 + n2
        mean = n1 * (n + 1) / 2.0
        _, counts = np.unique(scaled, return_counts=True)
        tie_term = float((counts**3 - counts).sum()) / ((n) * (n - 1))
        var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if var <= 0:
            raise ValueError("degenerate rank-sum variance (all observations tied)")
        w = w2 / 2.0
        dev = max(abs(w - mean) - 0.5, 0.0)
        z = dev / math.sqrt(var)
        p = min(1.0, 2.0 * _norm_sf(z))
        method = "approx"
    return StatResult(p_value=p, effect_size=effect, n=n1 + n2, test=TestKind.RANK_SUM, method=method)


def spearman(xs, ys) -> tuple[float, float]:
    """Spearman rank correlation with average ranks for ties; p-value from
    the t approximation."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("correlation undefined for constant input")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    n = x.size
    if abs(rho) >= 1.0:
        return math.copysign(1.0, rho), 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return rho, p


# ---------------------------------------------------------------------------
# Lesion grouping
# ---------------------------------------------------------------------------


class GSGroup(str, Enum):
    LOW = "LOW"  # 3+3
    INTERMEDIATE = "INTERMEDIATE"  # 3+4
    HIGH = "HIGH"  # 4+3 and higher
    UNKNOWN = "UNKNOWN"


class SizeGroup(str, Enum):
    SMALL = "SMALL"  # < 1 cc
    MEDIUM = "MEDIUM"  # [1, 2) cc
    LARGE = "LARGE"  # >= 2 cc


class ZoneGroup(str, Enum):
    PZ = "PZ"
    TZ = "TZ"
    AS = "AS"
    OTHER = "OTHER"


@dataclass(frozen=True)
class GroupKey:
    gs_group: GSGroup
    size_group: SizeGroup
    zone: ZoneGroup


def gs_group(primary: int | None, secondary: int | None) -> GSGroup:
    if primary is None or secondary is None:
        return GSGroup.UNKNOWN
    total = primary + secondary
    if total <= 6:
        return GSGroup.LOW
    if total == 7 and primary == 3:
        return GSGroup.INTERMEDIATE
    return GSGroup.HIGH


def size_group(volume_cc: float) -> SizeGroup:
    """Closed-left / open-right boundaries: [1, 2) cc is MEDIUM."""
    if volume_cc < 1.0:
        return SizeGroup.SMALL
    if volume_cc < 2.0:
        return SizeGroup.MEDIUM
    return SizeGroup.LARGE


def zone_group(zone: Zone) -> ZoneGroup:
    if zone in (Zone.PZ, Zone.TZ, Zone.AS):
        return ZoneGroup(zone.value)
    return ZoneGroup.OTHER


@dataclass
class EvaluatedLesion:
    case_id: str
    lesion_id: int
    dsc: float
    volume_cc: float
    gleason_primary: int | None
    gleason_secondary: int | None
    zone: Zone

    @property
    def key(self) -> tuple[str, int]:
        return (self.case_id, self.lesion_id)

    def group_key(self) -> GroupKey:
        return GroupKey(
            gs_group=gs_group(self.gleason_primary, self.gleason_secondary),
            size_group=size_group(self.volume_cc),
            zone=zone_group(self.zone),
        )


def collect_lesions(
    cases: list[CaseManifest], evaluation: DatasetEvaluation
) -> list[EvaluatedLesion]:
    """Join per-lesion DSC values with manifest metadata."""
    by_case = {c.case_id: c for c in cases}
    out = []
    for case_eval in evaluation.cases:
        manifest = by_case.get(case_eval.case_id)
        if manifest is None:
            raise KeyError(f"evaluation for unknown case {case_eval.case_id}")
        for lesion_id, dsc in case_eval.lesion_dsc.items():
            rec = manifest.lesion(lesion_id)
            out.append(
                EvaluatedLesion(
                    case_id=case_eval.case_id,
                    lesion_id=lesion_id,
                    dsc=dsc,
                    volume_cc=rec.volume_cc if rec.volume_cc is not None else 0.0,
                    gleason_primary=rec.gleason_primary,
                    gleason_secondary=rec.gleason_secondary,
                    zone=rec.zone,
                )
            )
    return out


def group_lesions(lesions: list[EvaluatedLesion]) -> dict[GroupKey, list[EvaluatedLesion]]:
    """Partition: every lesion lands in exactly one (GS, size, zone) cell."""
    groups: dict[GroupKey, list[EvaluatedLesion]] = {}
    for lesion in lesions:
        groups.setdefault(lesion.group_key(), []).append(lesion)
    return groups


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


def median_iqr(values) -> tuple[float, float, float]:
    """(median, q1, q3) with linear quartile interpolation."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    return (
        float(np.percentile(v, 50, method="linear")),
        float(np.percentile(v, 25, method="linear")),
        float(np.percentile(v, 75, method="linear")),
    )


@dataclass
class PairwiseComparison:
    model_a: str
    model_b: str
    n: int
    p_value: float
    effect_size: float
    significant: bool
    all_zero: bool = False


@dataclass
class GroupSummary:
    axis: str  # "gs" | "size" | "zone"
    group: str
    n: int
    median: float
    q1: float
    q3: float


@dataclass
class ModelSummary:
    model: str
    n_lesions: int
    median: float
    q1: float
    q3: float
    precision: float
    recall: float
    f1: float
    fp_per_lesion: float | None
    groups: list[GroupSummary] = field(default_factory=list)


@dataclass
class EvaluationReport:
    models: list[ModelSummary]
    pairwise: list[PairwiseComparison]
    significance_level: float = SIGNIFICANCE_LEVEL

    def to_json(self) -> dict:
        return {
            "significance_level": self.significance_level,
            "models": [
                {
                    "model": m.model,
                    "n_lesions": m.n_lesions,
                    "median_dsc": m.median,
                    "iqr": [m.q1, m.q3],
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "fp_per_lesion": m.fp_per_lesion,
                    "groups": [
                        {
                            "axis": g.axis,
                            "group": g.group,
                            "n": g.n,
                            "median_dsc": g.median,
                            "iqr": [g.q1, g.q3],
                        }
                        for g in m.groups
                    ],
                }
                for m in self.models
            ],
            "pairwise": [
                {
                    "model_a": c.model_a,
                    "model_b": c.model_b,
                    "n": c.n,
                    "p_value": c.p_value,
                    "effect_size": c.effect_size,
                    "significant": c.significant,
                    "all_zero": c.all_zero,
                }
                for c in self.pairwise
            ],
        }


def _axis_groups(lesions: list[EvaluatedLesion]) -> list[GroupSummary]:
    groups: list[GroupSummary] = []
    axes = [
        ("gs", lambda l: gs_group(l.gleason_primary, l.gleason_secondary).value),
        ("size", lambda l: size_group(l.volume_cc).value),
        ("zone", lambda l: zone_group(l.zone).value),
    ]
    for axis, keyfun in axes:
        buckets: dict[str, list[float]] = {}
        for lesion in lesions:
            buckets.setdefault(keyfun(lesion), []).append(lesion.dsc)
        for name in sorted(buckets):
            med, q1, q3 = median_iqr(buckets[name])
            groups.append(GroupSummary(axis=axis, group=name, n=len(buckets[name]),
                                       median=med, q1=q1, q3=q3))
    return groups


def build_report(
    evaluations: dict[str, DatasetEvaluation],
    cases: list[CaseManifest],
    significance_level: float = SIGNIFICANCE_LEVEL,
) -> EvaluationReport:
    """Per-model medians with IQR (overall and disaggregated), detection
    metrics, and cross-model paired signed-rank comparisons on shared
    lesions; pairwise p-values below ``significance_level`` are flagged."""
    if not evaluations:
        raise ValueError("need at least one model's evaluations")
    models: list[ModelSummary] = []
    lesion_maps: dict[str, dict[tuple[str, int], float]] = {}
    for name in sorted(evaluations):
        ev = evaluations[name]
        lesions = collect_lesions(cases, ev)
        lesion_maps[name] = {l.key: l.dsc for l in lesions}
        med, q1, q3 = median_iqr([l.dsc for l in lesions])
        metrics = ev.metrics()
        try:
            fp_rate = false_positives_per_lesion_from(ev)
        except ValueError:
            fp_rate = None
        models.append(
            ModelSummary(
                model=name,
                n_lesions=len(lesions),
                median=med,
                q1=q1,
                q3=q3,
                precision=metrics.precision,
                recall=metrics.recall,
                f1=metrics.f1,
                fp_per_lesion=fp_rate,
                groups=_axis_groups(lesions),
            )
        )

    pairwise: list[PairwiseComparison] = []
    names = sorted(evaluations)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            shared = sorted(set(lesion_maps[a]) & set(lesion_maps[b]))
            if not shared:
                raise ValueError(f"models {a} and {b} share no evaluated lesions")
            diffs = [lesion_maps[a][k] - lesion_maps[b][k] for k in shared]
            if all(d == 0 for d in diffs):
                pairwise.append(
                    PairwiseComparison(a, b, len(shared), 1.0, 0.0, False, all_zero=True)
                )
                continue
            res = wilcoxon_signed_rank(diffs)
            pairwise.append(
                PairwiseComparison(
                    a, b, len(shared), res.p_value, res.effect_size,
                    res.p_value < significance_level,
                )
            )
    return EvaluationReport(models=models, pairwise=pairwise,
                            significance_level=significance_level)


def false_positives_per_lesion_from(evaluation: DatasetEvaluation) -> float:
    from .evaluation import false_positives_per_lesion

    return false_positives_per_lesion(evaluation.all_matches())
