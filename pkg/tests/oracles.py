"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately naive (explicit voxel loops, flood fill,
full enumeration) and shares no code with the package implementations it
checks.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np

NEIGHBORS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def flood_fill_components(mask: np.ndarray) -> list[set[tuple[int, int, int]]]:
    """26-connected components of a binary 3D mask as voxel-coordinate sets."""
    mask = np.asarray(mask) > 0
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z] or seen[x, y, z]:
                    continue
                comp = set()
                queue = deque([(x, y, z)])
                seen[x, y, z] = True
                while queue:
                    cx, cy, cz = queue.popleft()
                    comp.add((cx, cy, cz))
                    for dx, dy, dz in NEIGHBORS_26:
                        px, py, pz = cx + dx, cy + dy, cz + dz
                        if 0 <= px < nx and 0 <= py < ny and 0 <= pz < nz:
                            if mask[px, py, pz] and not seen[px, py, pz]:
                                seen[px, py, pz] = True
                                queue.append((px, py, pz))
                comps.append(comp)
    return comps


def voxel_dsc(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def lesion_level_scores(
    gt_mask: np.ndarray,
    pred_mask: np.ndarray,
    spacing: tuple[float, float, float],
    dsc_threshold: float = 0.1,
    min_volume_cc: float = 0.1,
) -> dict:
    """Reference lesion-level evaluation.

    Protocol: predicted components whose volume does not strictly exceed
    ``min_volume_cc`` are ignored; each ground-truth component is paired
    with its best-DSC overlapping retained component (ties to the one
    first in scan order) and detected only when DSC strictly exceeds
    ``dsc_threshold``; retained components detecting nothing are false
    positives.
    """
    voxel_cc = spacing[0] * spacing[1] * spacing[2] / 1000.0
    gt_comps = flood_fill_components(gt_mask)
    pred_comps = flood_fill_components(pred_mask)
    retained = [c for c in pred_comps if len(c) * voxel_cc > min_volume_cc]
    ignored = [c for c in pred_comps if len(c) * voxel_cc <= min_volume_cc]

    per_lesion_dsc = []
    detecting = set()
    tp = fn = 0
    for g in gt_comps:
        best_dsc, best_idx = 0.0, None
        for idx, p in enumerate(retained):
            if not (g & p):
                continue
            d = voxel_dsc(g, p)
            if d > best_dsc:
                best_dsc, best_idx = d, idx
        if best_idx is not None and best_dsc > dsc_threshold:
            tp += 1
            detecting.add(best_idx)
        else:
            fn += 1
        per_lesion_dsc.append(best_dsc)
    fp = sum(1 for idx in range(len(retained)) if idx not in detecting)

    p_total = tp + fn
    recall = tp / p_total if p_total else 0.0
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return {
        "n_gt": len(gt_comps),
        "n_pred": len(pred_comps),
        "n_retained": len(retained),
        "n_ignored": len(ignored),
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "recall": recall,
        "precision": precision,
        "f1": f1,
        "per_lesion_dsc": sorted(per_lesion_dsc),
    }


# ---------------------------------------------------------------------------
# Rank statistics by full enumeration
# ---------------------------------------------------------------------------


def average_ranks(values) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def signed_rank_exact(differences) -> float:
    """Two-sided p by enumerating every sign assignment of the ranked
    absolute differences (zeros dropped)."""
    d = [x for x in differences if x != 0]
    n = len(d)
    ranks = average_ranks([abs(x) for x in d])
    total = sum(ranks)
    w_obs = sum(r for x, r in zip(d, ranks) if x > 0)
    dev_obs = abs(2 * w_obs - total)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for s, r in zip(signs, ranks) if s)
        if abs(2 * w - total) >= dev_obs - 1e-9:
            hits += 1
    return hits / 2**n


def rank_sum_exact(sample_a, sample_b) -> float:
    """Two-sided p by enumerating every split of the pooled ranks."""
    pooled = list(sample_a) + list(sample_b)
    ranks = average_ranks(pooled)
    n1 = len(sample_a)
    w_obs = sum(ranks[:n1])
    mean = n1 * sum(ranks) / len(ranks)
    dev_obs = abs(w_obs - mean)
    hits = total = 0
    for combo in itertools.combinations(range(len(ranks)), n1):
        w = sum(ranks[i] for i in combo)
        total += 1
        if abs(w - mean) >= dev_obs - 1e-9:
            hits += 1
    return hits / total


def spearman_via_pearson(xs, ys) -> float:
    rx = average_ranks(list(xs))
    ry = average_ranks(list(ys))
    n = len(rx)
    mx = sum(rx) / n
    my = sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def bilinear_sample(arr: np.ndarray, u: float, v: float) -> float:
    """Bilinear lookup with edge clamping at fractional coords (u, v)."""
    nx, ny = arr.shape
    u = min(max(u, 0.0), nx - 1.0)
    v = min(max(v, 0.0), ny - 1.0)
    x0, y0 = int(math.floor(u)), int(math.floor(v))
    x1, y1 = min(x0 + 1, nx - 1), min(y0 + 1, ny - 1)
    fx, fy = u - x0, v - y0
    return (
        arr[x0, y0] * (1 - fx) * (1 - fy)
        + arr[x1, y0] * fx * (1 - fy)
        + arr[x0, y1] * (1 - fx) * fy
        + arr[x1, y1] * fx * fy
    )
