"""Patient-level folds, ROC AUC, two-sample KS test, FROC curves."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple  # tuple of tuples of patient ids
    k: int
    seed: int

    def test_patients(self, i: int) -> tuple:
        return self.folds[i]

    def train_patients(self, i: int) -> tuple:
        return tuple(p for j, f in enumerate(self.folds) if j != i for p in f)


def split_patients(patients, k: int = 6, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    patients = list(patients)
    if len(set(patients)) != len(patients):
        raise DataError("duplicate patient ids")
    if k < 1 or len(patients) < k:
        raise DataError(f"cannot split {len(patients)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    folds = [[] for _ in range(k)]
    for i, j in enumerate(order):
        folds[i % k].append(patients[j])
    return FoldSplit(tuple(tuple(sorted(f)) for f in folds), k, seed)


def _scores_labels(scores, labels=None):
    if labels is None:
        arr = list(scores)
        s = np.array([a[0] for a in arr], dtype=np.float64)
        y = np.array([a[1] for a in arr])
    else:
        s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    return s, y > 0


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney AUC, ties counted one half.

    Accepts either ``(score, label)`` pairs or parallel ``scores, labels``.
    """
    s, pos = _scores_labels(scores, labels)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc needs both classes")
    ranks = rankdata(s)  # average ranks resolve ties as one half
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores, labels=None) -> list[tuple]:
    """(threshold, fpr, tpr) per distinct threshold, descending."""
    s, pos = _scores_labels(scores, labels)
    thresholds = np.unique(s)[::-1]
    sp, sn = np.sort(s[pos]), np.sort(s[~pos])
    tpr = (len(sp) - np.searchsorted(sp, thresholds, side="left")) / max(len(sp), 1)
    fpr = (len(sn) - np.searchsorted(sn, thresholds, side="left")) / max(len(sn), 1)
    return [(float(t), float(f), float(r)) for t, f, r in zip(thresholds, fpr, tpr)]


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """P(K > lam) for the Kolmogorov distribution, alternating series."""
    if lam <= 0.2:
        # the series has not converged at 100 terms here; Q(0.2) = 1 - 5e-19
        return 1.0
    j = np.arange(1, terms + 1)
    q = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam))
    return float(min(max(q, 0.0), 1.0))


@dataclass(frozen=True)
class KsResult:
    D: float
    p: float


def ks_test(a, b) -> KsResult:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise DataError("ks_test needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    d = float(np.max(np.abs(fa - fb)))
    ne = len(a) * len(b) / (len(a) + len(b))
    return KsResult(d, kolmogorov_sf(math.sqrt(ne) * d))


@dataclass
class FrocCurve:
    points: list  # (fp_per_volume, sensitivity)
    thresholds: list
    n_volumes: int
    n_objects: int

    def fp(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def sensitivity(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


@dataclass(frozen=True)
class ScoredCandidate:
    patient_id: str
    gt_object_id: int
    label: int
    score: float


def froc(candidates, n_volumes: int, n_objects: int | None = None) -> FrocCurve:
    """One point per distinct score, thresholds descending.

    ``n_objects`` is the number of ground-truth objects across all volumes;
    it defaults to the distinct objects hit by some candidate.
    """
    if n_volumes <= 0:
        raise DataError("n_volumes must be positive")
    cands = [c if isinstance(c, ScoredCandidate) else ScoredCandidate(*c) for c in candidates]
    scores = np.array([c.score for c in cands], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError("froc scores must be finite")
    objects = {(c.patient_id, c.gt_object_id) for c in cands if c.label == 1 and c.gt_object_id > 0}
    total = len(objects) if n_objects is None else int(n_objects)
    if total < len(objects):
        raise DataError("n_objects smaller than the number of hit objects")
    # earliest (highest) threshold at which each object is first detected
    first = {}
    for c in cands:
        if c.label == 1 and c.gt_object_id > 0:
            key = (c.patient_id, c.gt_object_id)
            first[key] = max(first.get(key, -np.inf), c.score)
    obj_scores = np.sort(np.fromiter(first.values(), dtype=np.float64))
    neg_scores = np.sort(scores[np.array([c.label != 1 for c in cands], dtype=bool)]) if cands else np.array([])
    thresholds = np.unique(scores)[::-1]
    n_obj_at = len(obj_scores) - np.searchsorted(obj_scores, thresholds, side="left")
    n_neg_at = len(neg_scores) - np.searchsorted(neg_scores, thresholds, side="left")
    points = [
        (float(n) / n_volumes, (float(o) / total) if total else 0.0)
        for n, o in zip(n_neg_at, n_obj_at)
    ]
    return FrocCurve(points, thresholds.tolist(), int(n_volumes), total)


def sensitivity_at(curve: FrocCurve, fp_per_vol: float) -> float:
    """Step-function reading: sensitivity of the last point with FP rate <= query."""
    best = 0.0
    for fp, sens in curve.points:
        if fp <= fp_per_vol:
            best = sens
        else:
            break
    return best


def partial_auc(curve: FrocCurve, max_fp: float = 10.0) -> float:
    """Mean of the step-function sensitivity over FP/vol in [0, max_fp]."""
    fps = [fp for fp, _ in curve.points if fp < max_fp]
    edges = sorted(set([0.0] + fps + [max_fp]))
    area = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        area += (hi - lo) * sensitivity_at(curve, lo)
    return area / max_fp


def slice_stats(view_probs, voi_labels, cutoff: float = 0.5) -> dict:
    """Mean count of views at or above ``cutoff`` per positive / negative VOI, plus slice AUC."""
    P = np.asarray(view_probs, dtype=np.float64)
    y = np.asarray(voi_labels) > 0
    counts = (P >= cutoff).sum(axis=1)
    view_labels = np.repeat(y, P.shape[1])
    auc = roc_auc(P.ravel(), view_labels) if 0 < y.sum() < len(y) else float("nan")
    return {
        "per_voi_mean_pos_slices": float(counts[y].mean()) if y.any() else 0.0,
        "per_voi_mean_neg_slices": float(counts[~y].mean()) if (~y).any() else 0.0,
        "auc": auc,
    }


def write_froc_csv(curve: FrocCurve, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fp_per_vol", "sensitivity"])
        for t, (fp, s) in zip(curve.thresholds, curve.points):
            w.writerow([repr(float(t)), repr(fp), repr(s)])


def write_roc_csv(points, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in points:
            w.writerow([repr(t), repr(fpr), repr(tpr)])
