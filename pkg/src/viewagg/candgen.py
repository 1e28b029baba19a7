"""Candidate generation: threshold a grid probability map, group, label against masks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import CalibrationError, DataError
from .features3d import STRIDE
from .volume import Volume

VOI_HALF = 22
_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)
CSV_HEADER = ["patient_id", "x", "y", "z", "label", "gt_object_id"]


@dataclass(frozen=True)
class Candidate:
    patient_id: str
    centroid: tuple  # full-resolution (x, y, z)
    label: int
    gt_object_id: int = 0
    voi_half: int = VOI_HALF

    def __post_init__(self):
        if self.label not in (1, -1):
            raise DataError(f"candidate label must be +1/-1, got {self.label}")
        if (self.label == 1) != (self.gt_object_id > 0):
            raise DataError("label == +1 iff gt_object_id > 0")


@dataclass
class CandidateSet:
    candidates: list = field(default_factory=list)
    source_volume: str = ""
    threshold_used: float = float("nan")

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


def _probs(probmap) -> np.ndarray:
    return np.asarray(probmap.data if isinstance(probmap, Volume) else probmap, dtype=np.float64)


def generate_candidates(probmap, threshold: float, stride: int = STRIDE) -> list[tuple]:
    """One full-resolution centroid per 26-connected super-threshold group on the grid."""
    p = _probs(probmap)
    labels, n = ndi.label(p >= threshold, structure=_CONNECTIVITY)
    if n == 0:
        return []
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1:]
    out = []
    coords = np.indices(p.shape).reshape(3, -1)
    means = [np.bincount(flat, weights=c, minlength=n + 1)[1:] / counts for c in coords]
    # round half up, then back to full resolution
    grid = np.floor(np.stack(means, axis=1) + 0.5).astype(np.int64)
    for g in grid:
        out.append(tuple(int(c) * stride for c in g))
    return out


def label_candidates(centroids, gt_mask: Volume, patient_id: str = "", threshold: float = float("nan"),
                     source: str = "") -> CandidateSet:
    mask = np.asarray(gt_mask.data if isinstance(gt_mask, Volume) else gt_mask)
    cands = []
    for c in centroids:
        if any(ci < 0 or ci >= n for ci, n in zip(c, mask.shape)):
            raise DataError(f"centroid {c} outside mask of shape {mask.shape}")
        obj = int(mask[tuple(c)])
        cands.append(Candidate(patient_id, tuple(int(ci) for ci in c), 1 if obj > 0 else -1, obj))
    return CandidateSet(cands, source, threshold)


def object_ids(gt_mask) -> set:
    mask = np.asarray(gt_mask.data if isinstance(gt_mask, Volume) else gt_mask)
    return set(np.flatnonzero(np.bincount(mask.ravel(order="K"))).tolist()) - {0}


def candgen_sensitivity(cs, gt_mask, objects: set | None = None) -> dict:
    """Object-level hit rate and FP count of one candidate set.

    ``objects`` may carry the precomputed ids of ``gt_mask``.
    """
    if objects is None:
        objects = object_ids(gt_mask)
    hit = {c.gt_object_id for c in cs if c.label == 1}
    sens = len(hit & objects) / len(objects) if objects else 1.0
    return {
        "object_sensitivity": sens,
        "fp_per_case": sum(1 for c in cs if c.label == -1),
        "n_objects": len(objects),
        "n_hit": len(hit & objects),
    }


def _pooled(probmaps, masks, threshold, objects=None):
    objects = objects or [object_ids(m) for m in masks]
    hits = n_obj = fps = 0
    for p, m, obj in zip(probmaps, masks, objects):
        s = candgen_sensitivity(label_candidates(generate_candidates(p, threshold), m), m, obj)
        hits += s["n_hit"]
        n_obj += s["n_objects"]
        fps += s["fp_per_case"]
    return (hits / n_obj if n_obj else 1.0), fps / max(len(masks), 1)


@dataclass(frozen=True)
class Calibration:
    threshold: float
    sensitivity: float
    fp_per_case: float


def calibrate_threshold(probmaps, masks, target_sensitivity: float = 1.0, step: float = 0.01,
                        floor: float = 1e-3, max_fp_per_case: float | None = None) -> Calibration:
    """Pick the candidate threshold on labeled validation probability maps.

    Without ``max_fp_per_case``: the largest threshold at which pooled object
    sensitivity reaches the target; a descending sweep brackets it and
    bisection over the distinct probability values inside the bracket refines
    it.  With a budget: the sweep point of highest pooled sensitivity among
    those whose FP/case stays within the budget, lowest threshold on ties.
    Sensitivity is not monotone in the threshold (groups merge and their
    centroids can leave the object), so the budgeted choice scans rather than
    bisects.
    """
    if len(probmaps) != len(masks) or not masks:
        raise DataError("calibration needs matching, non-empty probmap and mask lists")
    objects = [object_ids(m) for m in masks]
    pooled = lambda t: _pooled(probmaps, masks, t, objects)  # noqa: E731
    grid = np.round(np.arange(1.0, 0.0, -step), 10)
    grid = np.append(grid[grid >= floor], floor)
    if max_fp_per_case is not None:
        return _best_within_budget(pooled, grid, target_sensitivity, max_fp_per_case)
    above = None
    for t in grid:
        sens, fp = pooled(t)
        if sens >= target_sensitivity:
            break
        above = t
    else:
        raise CalibrationError(f"object sensitivity {sens:.3f} < {target_sensitivity} even at threshold {floor}")
    best = Calibration(float(t), sens, fp)
    if above is None:
        return best
    values = _values_between(probmaps, t, above)
    lo, hi = 0, len(values) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        s, f = pooled(values[mid])
        if s >= target_sensitivity:
            best = Calibration(float(values[mid]), s, f)
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def _values_between(probmaps, lo, hi):
    values = np.unique(np.concatenate([_probs(p).ravel() for p in probmaps]))
    return values[(values > lo) & (values < hi)]


def _best_within_budget(pooled, grid, target, budget) -> Calibration:
    best = None
    for t in grid:
        sens, fp = pooled(t)
        if fp > budget:
            break
        if best is None or sens >= best.sensitivity:
            best = Calibration(float(t), sens, fp)
    if best is None:
        raise CalibrationError(f"FP/case exceeds {budget} even at threshold {grid[0]}")
    if best.sensitivity < target:
        raise CalibrationError(
            f"object sensitivity {best.sensitivity:.3f} < {target} within {budget} FP/case "
            f"(threshold {best.threshold:.4g})")
    return best


def write_candidates_csv(candidates, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in candidates:
            w.writerow([c.patient_id, *c.centroid, c.label, c.gt_object_id])


def read_candidates_csv(path) -> list[Candidate]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise DataError(f"{path}: unexpected candidate header {header}")
        return [Candidate(row[0], (int(row[1]), int(row[2]), int(row[3])), int(row[4]), int(row[5])) for row in r]
