"""Evaluation engine: Dice score coefficient, 95th-percentile Hausdorff
distance with physical spacing, and multi-organ report assembly.

Conventions, pinned for reproducibility: surfaces are foreground voxels with a
6-connected background (or out-of-bounds) neighbor; the 95th percentile uses
linear interpolation on the sorted directional distances; the reported value
is the max of both directional percentiles.  Absent-organ results are None and
are excluded from aggregates with an explicit skip count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .voldata import LabelMap, OrganSpec


@dataclass(frozen=True)
class OrganReport:
    organ_id: int
    dsc: Optional[float]  # defined iff gt or pred non-empty
    hd95: Optional[float]  # mm; defined iff both non-empty
    gt_voxels: int
    pred_voxels: int


def dsc(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """2|A∩B| / (|A|+|B|); None when both masks are empty, 0 when exactly one is."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a, b = int(pred.sum()), int(gt.sum())
    if a == 0 and b == 0:
        return None
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (a + b)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """(N, 3) coordinates of foreground voxels with a 6-connected background
    or out-of-bounds neighbor."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return np.argwhere(m & ~interior)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float]) -> Optional[float]:
    """Symmetric 95th-percentile surface distance in mm; None if a mask is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    spacing = np.asarray(spacing, dtype=np.float64)
    sp = surface_voxels(pred) * spacing
    sg = surface_voxels(gt) * spacing
    d_pg = cKDTree(sg).query(sp)[0]
    d_gp = cKDTree(sp).query(sg)[0]
    return float(max(np.percentile(d_pg, 95), np.percentile(d_gp, 95)))


def evaluate_case(
    pred: LabelMap, gt: LabelMap, organs: Sequence[OrganSpec]
) -> list[OrganReport]:
    """One report per organ for a single case."""
    if pred.shape != gt.shape or pred.spacing != gt.spacing:
        raise ValueError(
            f"geometry mismatch: pred {pred.shape}/{pred.spacing} "
            f"vs gt {gt.shape}/{gt.spacing}"
        )
    reports = []
    for organ in organs:
        pm = pred.data == organ.id
        gm = gt.data == organ.id
        reports.append(
            OrganReport(
                organ_id=organ.id,
                dsc=dsc(pm, gm),
                hd95=hd95(pm, gm, gt.spacing),
                gt_voxels=int(gm.sum()),
                pred_voxels=int(pm.sum()),
            )
        )
    return reports


@dataclass(frozen=True)
class OrganAggregate:
    organ_id: int
    n_cases: int
    dsc_mean: Optional[float]
    dsc_std: Optional[float]
    dsc_skipped: int
    hd95_mean: Optional[float]
    hd95_std: Optional[float]
    hd95_skipped: int


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std (ddof=0)


def aggregate(case_reports: Sequence[Sequence[OrganReport]]) -> list[OrganAggregate]:
    """Per-organ mean/std over cases, skipping undefined entries."""
    by_organ: dict[int, list[OrganReport]] = {}
    for case in case_reports:
        for rep in case:
            by_organ.setdefault(rep.organ_id, []).append(rep)
    out = []
    for organ_id in sorted(by_organ):
        reps = by_organ[organ_id]
        dscs = [r.dsc for r in reps if r.dsc is not None]
        hds = [r.hd95 for r in reps if r.hd95 is not None]
        dsc_mean, dsc_std = _mean_std(dscs)
        hd_mean, hd_std = _mean_std(hds)
        out.append(
            OrganAggregate(
                organ_id=organ_id,
                n_cases=len(reps),
                dsc_mean=dsc_mean,
                dsc_std=dsc_std,
                dsc_skipped=len(reps) - len(dscs),
                hd95_mean=hd_mean,
                hd95_std=hd_std,
                hd95_skipped=len(reps) - len(hds),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Report files (CSV).  Undefined values are written as "NA".
# ---------------------------------------------------------------------------

CASE_COLUMNS = ("organ", "case", "dsc", "hd95", "gt_voxels", "pred_voxels")
AGGREGATE_COLUMNS = (
    "organ",
    "n_cases",
    "dsc_mean",
    "dsc_std",
    "dsc_skipped",
    "hd95_mean",
    "hd95_std",
    "hd95_skipped",
)


def _fmt(value) -> str:
    return "NA" if value is None else repr(float(value))


def write_case_table(path, case_reports, case_ids) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CASE_COLUMNS)
        for case_id, reports in zip(case_ids, case_reports):
            for rep in reports:
                writer.writerow(
                    [
                        rep.organ_id,
                        case_id,
                        _fmt(rep.dsc),
                        _fmt(rep.hd95),
                        rep.gt_voxels,
                        rep.pred_voxels,
                    ]
                )


def write_aggregate_table(path, aggregates: Sequence[OrganAggregate]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for agg in aggregates:
            writer.writerow(
                [
                    agg.organ_id,
                    agg.n_cases,
                    _fmt(agg.dsc_mean),
                    _fmt(agg.dsc_std),
                    agg.dsc_skipped,
                    _fmt(agg.hd95_mean),
                    _fmt(agg.hd95_std),
                    agg.hd95_skipped,
                ]
            )


COMPARE_COLUMNS = ("organ", "dsc_a", "dsc_b", "dsc_delta")


def write_compare_table(
    path, aggs_a: Sequence[OrganAggregate], aggs_b: Sequence[OrganAggregate]
) -> None:
    """Per-organ mean-DSC comparison of run B against run A (delta = B - A)."""
    by_a = {a.organ_id: a for a in aggs_a}
    by_b = {b.organ_id: b for b in aggs_b}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for organ_id in sorted(by_a | by_b):
            a = by_a.get(organ_id)
            b = by_b.get(organ_id)
            da = a.dsc_mean if a is not None else None
            db = b.dsc_mean if b is not None else None
            delta = db - da if da is not None and db is not None else None
            writer.writerow([organ_id, _fmt(da), _fmt(db), _fmt(delta)])


def read_aggregate_table(path) -> list[OrganAggregate]:
    def parse(v):
        return None if v == "NA" else float(v)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(AGGREGATE_COLUMNS):
            raise ValueError(f"unexpected aggregate table columns {reader.fieldnames}")
        return [
            OrganAggregate(
                organ_id=int(row["organ"]),
                n_cases=int(row["n_cases"]),
                dsc_mean=parse(row["dsc_mean"]),
                dsc_std=parse(row["dsc_std"]),
                dsc_skipped=int(row["dsc_skipped"]),
                hd95_mean=parse(row["hd95_mean"]),
                hd95_std=parse(row["hd95_std"]),
                hd95_skipped=int(row["hd95_skipped"]),
            )
            for row in reader
        ]
