"""Patient-level cross-validation driver: candidates, views, HOG, C1 SVM, C2 fusion.

Everything here is deterministic given the config and seed.  Wall-clock
timings are kept apart from the report so that reports can be compared
byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import candgen as cg
from .errors import DataError, ViewAggError
from .evaluation import (
    ScoredCandidate, froc, ks_test, partial_auc, roc_auc, roc_points, sensitivity_at,
    slice_stats, split_patients, write_froc_csv, write_roc_csv,
)
from .features3d import SCALES, STRIDE, GridFeatureField, extract_grid_features
from .forest import ForestConfig, ForestModel, balance_samples, predict_probmap, train_forest
from .fusion import FusionModel, max_pool, mean_pool, train_fusion
from .hog import HogConfig, encode_batch
from .linsvm import LinearModel, SvmConfig, sigmoid, train_svm
from .views import ViewSamplerConfig, view_stack
from .volume import Volume, load_volume

log = logging.getLogger(__name__)

REPORT_VERSION = 1
MODES = ("max", "mean", "sparse")
OPERATING_FP = (1.0, 2.0, 3.0, 6.0, 10.0)
# run locations stay out of reports so relocated reruns are byte-identical
PATH_KEYS = ("manifest", "model_dir", "out_dir")


@dataclass
class CandgenSection:
    n_trees: int = 50
    max_depth: int = 20
    min_leaf: int = 5
    negative_ratio: float = 3.0
    threshold: float | None = None  # fixed threshold; None means calibrate
    target_sensitivity: float = 0.95
    max_fp_per_case: float | None = 35.0  # None: largest threshold reaching the target
    inner_folds: int = 2


@dataclass
class SvmSection:
    C: float = 1.0
    tolerance: float = 1e-3
    bias: bool = False


@dataclass
class FusionSection:
    mode: str = "sparse"
    prior_init: float = 1.0
    intercept: bool = True
    cross_fit: bool = True  # train C2 on out-of-fold C1 scores of the training candidates


@dataclass
class EvalSection:
    folds: int = 6
    seed: int = 0


@dataclass
class PipelineConfig:
    manifest: str = ""
    model_dir: str = ""
    out_dir: str = ""
    candgen: CandgenSection = field(default_factory=CandgenSection)
    views_k: int = 4
    hog_cells: int = 5
    svm: SvmSection = field(default_factory=SvmSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.fusion.mode not in MODES:
            raise DataError(f"fusion mode must be one of {MODES}, got {self.fusion.mode!r}")
        if self.eval.folds < 2:
            raise DataError("need at least 2 folds")
        if self.candgen.inner_folds < 2:
            raise DataError("need at least 2 inner folds for calibration")
        HogConfig(cells_per_side=self.hog_cells)  # validates the divisor
        ViewSamplerConfig(k=self.views_k)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {"candgen": CandgenSection, "svm": SvmSection, "fusion": FusionSection, "eval": EvalSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sections:
                sub = sections[k]
                bad = set(v) - {f.name for f in fields(sub)}
                if bad:
                    raise DataError(f"unknown keys in config section {k!r}: {sorted(bad)}")
                kw[k] = sub(**v)
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {path}: {e}") from e

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the stage name."""
    try:
        yield
    except ViewAggError as e:
        if not str(e).startswith("["):
            e.args = (f"[{name}] {e}",) + e.args[1:]
        raise


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


@dataclass
class Patient:
    pid: str
    image: Volume
    mask: Volume
    n_nodes: int


def load_manifest(path) -> list[Patient]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"manifest {path} lists no patients")
    need = {"patient_id", "image_path", "mask_path", "n_nodes"}
    if not need <= set(rows[0]):
        raise DataError(f"manifest {path} lacks columns {sorted(need - set(rows[0]))}")
    out = []
    for r in rows:
        image = load_volume(path.parent / r["image_path"])
        mask = load_volume(path.parent / r["mask_path"])
        if image.dims != mask.dims:
            raise DataError(f"patient {r['patient_id']}: image and mask dims differ")
        n = len(set(np.unique(mask.data).tolist()) - {0})
        if n != int(r["n_nodes"]):
            raise DataError(f"patient {r['patient_id']}: manifest says {r['n_nodes']} nodes, mask has {n}")
        out.append(Patient(r["patient_id"], image, mask, n))
    if len({p.pid for p in out}) != len(out):
        raise DataError("duplicate patient ids in manifest")
    return sorted(out, key=lambda p: p.pid)


class FeatureStore:
    """Grid features per patient, computed once; optionally persisted as .npy."""

    def __init__(self, patients, cache_dir=None):
        self.patients = {p.pid: p for p in patients}
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._fields: dict[str, GridFeatureField] = {}

    def __getitem__(self, pid: str) -> GridFeatureField:
        if pid not in self._fields:
            self._fields[pid] = self._load_or_compute(pid)
        return self._fields[pid]

    def _load_or_compute(self, pid):
        f = self.cache_dir / f"features_{pid}.npy" if self.cache_dir else None
        if f is not None and f.is_file():
            return GridFeatureField(np.load(f), STRIDE, SCALES)
        field_ = extract_grid_features(self.patients[pid].image)
        if f is not None:
            f.parent.mkdir(parents=True, exist_ok=True)
            np.save(f, field_.values)
        return field_

    def samples(self, pids):
        """Stacked grid feature vectors and +1/-1 labels from the masks."""
        X, y = [], []
        for pid in pids:
            fld = self[pid]
            g = self.patients[pid].mask.data[::STRIDE, ::STRIDE, ::STRIDE]
            if g.shape != fld.grid_dims:
                raise DataError(f"patient {pid}: grid {fld.grid_dims} vs mask grid {g.shape}")
            X.append(fld.vectors())
            y.append(np.where(g.ravel(order="C") > 0, 1, -1))
        return np.concatenate(X), np.concatenate(y)


def fit_forest(store: FeatureStore, pids, cfg: CandgenSection, seed: int) -> ForestModel:
    X, y = store.samples(pids)
    Xb, yb = balance_samples(X, y, cfg.negative_ratio, derive_seed(seed, 1))
    fcfg = ForestConfig(n_trees=cfg.n_trees, max_depth=cfg.max_depth, min_leaf=cfg.min_leaf,
                        seed=derive_seed(seed, 2), negative_ratio=cfg.negative_ratio)
    return train_forest(Xb, yb, fcfg)


@dataclass
class FoldCandidates:
    threshold: float
    calibration: dict
    forest: ForestModel
    train: dict  # pid -> CandidateSet, from out-of-fold probability maps
    test: dict  # pid -> CandidateSet
    inner: tuple = ()  # inner patient groups of the training fold


def fold_candidates(store: FeatureStore, train_pids, test_pids, cfg: CandgenSection, seed: int,
                    frozen: ForestModel | None = None) -> FoldCandidates:
    """Candidates for one outer fold.

    Training patients get candidates from out-of-fold probability maps of an
    inner patient-level split, so their candidate statistics match what a
    held-out patient sees.  The threshold is calibrated on those same maps.
    The final forest sees every training patient and scores the test fold.
    """
    masks = {pid: store.patients[pid].mask for pid in list(train_pids) + list(test_pids)}
    if frozen is not None:
        thr = cfg.threshold if cfg.threshold is not None else frozen.operating_threshold
        if thr is None:
            raise DataError("frozen forest carries no operating threshold; pass --threshold")
        maps = {pid: predict_probmap(frozen, store[pid]) for pid in masks}
        sets = {pid: cg.label_candidates(cg.generate_candidates(maps[pid], thr), masks[pid], pid, thr)
                for pid in masks}
        inner = split_patients(train_pids, cfg.inner_folds, derive_seed(seed, 3))
        return FoldCandidates(float(thr), {"source": "frozen"}, frozen,
                              {p: sets[p] for p in train_pids}, {p: sets[p] for p in test_pids}, inner.folds)

    inner = split_patients(train_pids, cfg.inner_folds, derive_seed(seed, 3))
    oof = {}
    for i in range(inner.k):
        m = fit_forest(store, inner.train_patients(i), cfg, derive_seed(seed, 10 + i))
        for pid in inner.test_patients(i):
            oof[pid] = predict_probmap(m, store[pid])
    train_pids = sorted(train_pids)
    if cfg.threshold is None:
        cal = cg.calibrate_threshold([oof[p] for p in train_pids], [masks[p] for p in train_pids],
                                     cfg.target_sensitivity, max_fp_per_case=cfg.max_fp_per_case)
        thr = cal.threshold
        calibration = {"source": "calibrated", "sensitivity": cal.sensitivity, "fp_per_case": cal.fp_per_case}
    else:
        thr = float(cfg.threshold)
        calibration = {"source": "fixed"}
    final = fit_forest(store, train_pids, cfg, derive_seed(seed, 4))
    final.operating_threshold = thr
    train_sets = {p: cg.label_candidates(cg.generate_candidates(oof[p], thr), masks[p], p, thr) for p in train_pids}
    test_sets = {}
    for p in test_pids:
        pm = predict_probmap(final, store[p])
        test_sets[p] = cg.label_candidates(cg.generate_candidates(pm, thr), masks[p], p, thr)
    return FoldCandidates(float(thr), calibration, final, train_sets, test_sets, inner.folds)


class HogStore:
    """HOG descriptors of all views per (patient, centroid), for one HOG config."""

    def __init__(self, patients: dict, hog: HogConfig, views: ViewSamplerConfig):
        self.patients, self.hog, self.views = patients, hog, views
        self._cache: dict[tuple, np.ndarray] = {}

    def descriptors(self, pid: str, centroids) -> np.ndarray:
        """``(len(centroids), views_per_candidate, descriptor_dim)``."""
        missing = [c for c in dict.fromkeys(centroids) if (pid, c) not in self._cache]
        if missing:
            img = self.patients[pid].image
            stacks = np.concatenate([view_stack(img, c, self.views) for c in missing])
            desc = encode_batch(stacks, self.hog).reshape(len(missing), self.views.views_per_candidate, -1)
            for c, d in zip(missing, desc):
                self._cache[(pid, c)] = d
        V, D = self.views.views_per_candidate, self.hog.descriptor_dim
        if not centroids:
            return np.zeros((0, V, D))
        return np.stack([self._cache[(pid, c)] for c in centroids])


def _gather(sets: dict, hogs: HogStore):
    """Flatten candidate sets (in patient id order) into descriptors and metadata."""
    X, meta = [], []
    for pid in sorted(sets):
        cands = list(sets[pid])
        X.append(hogs.descriptors(pid, [c.centroid for c in cands]))
        meta.extend(cands)
    V, D = hogs.views.views_per_candidate, hogs.hog.descriptor_dim
    X = np.concatenate(X) if X else np.zeros((0, V, D))
    return X, meta


@dataclass
class FoldModels:
    svm: LinearModel
    fusion: FusionModel
    # the sparse fusion with the opposite intercept setting, reported alongside
    fusion_alt: FusionModel | None = None


def alt_mode(fusion: FusionModel) -> str:
    return "sparse_without_intercept" if fusion.intercept else "sparse_with_intercept"


def candidate_scores(view_p: np.ndarray, fusion: FusionModel, fusion_alt: FusionModel | None = None) -> dict:
    out = {"max": max_pool(view_p), "mean": mean_pool(view_p), "sparse": fusion.predict(view_p)}
    if fusion_alt is not None:
        out[alt_mode(fusion)] = fusion_alt.predict(view_p)
    return out


def _svm(X, labels, cfg: PipelineConfig, seed: int) -> LinearModel:
    V, D = X.shape[1], X.shape[2]
    return train_svm(X.reshape(-1, D), np.repeat(labels, V),
                     SvmConfig(C=cfg.svm.C, tolerance=cfg.svm.tolerance, bias=cfg.svm.bias, seed=seed))


def view_probs(svm: LinearModel, X) -> np.ndarray:
    """Sigmoid view probabilities, ``(candidates, views)``."""
    if not len(X):
        return np.zeros(X.shape[:2])
    return sigmoid(svm.decision(X.reshape(-1, X.shape[2]))).reshape(X.shape[:2])


def train_classifiers(X, meta, cfg: PipelineConfig, seed: int, inner=()) -> tuple[FoldModels, np.ndarray]:
    """C1 on all training views with VOI labels, C2 on training score vectors.

    With ``cfg.fusion.cross_fit`` the C2 training scores of each inner patient
    group come from a C1 trained without that group, so C2 sees score vectors
    distributed like those of unseen patients.  Returns the models and the
    in-sample C1 probabilities of the training candidates.
    """
    labels = np.array([c.label for c in meta])
    if len(np.unique(labels)) < 2:
        raise DataError("training candidates contain a single class")
    with stage("svm"):
        svm = _svm(X, labels, cfg, seed)
        train_p = view_probs(svm, X)
        fit_p = train_p
        if cfg.fusion.cross_fit:
            if len(inner) < 2:
                raise DataError("cross-fitted fusion needs an inner patient split")
            pids = np.array([c.patient_id for c in meta])
            fit_p = np.empty_like(train_p)
            for j, group in enumerate(inner):
                held = np.isin(pids, group)
                if len(np.unique(labels[~held])) < 2:
                    raise DataError(f"inner group {j} leaves a single class for C1")
                fit_p[held] = view_probs(_svm(X[~held], labels[~held], cfg, derive_seed(seed, j)), X[held])
    with stage("fusion"):
        fus = train_fusion(fit_p, labels, prior_init=cfg.fusion.prior_init, intercept=cfg.fusion.intercept)
        alt = train_fusion(fit_p, labels, prior_init=cfg.fusion.prior_init, intercept=not cfg.fusion.intercept)
    return FoldModels(svm, fus, alt), train_p


def _froc_summary(curve) -> dict:
    return {
        "partial_auc_0_10": partial_auc(curve, 10.0),
        "sensitivity_at": {f"{fp:g}": sensitivity_at(curve, fp) for fp in OPERATING_FP},
        "n_points": len(curve.points),
    }


@dataclass
class RunOutputs:
    report: dict
    timing: dict
    curves: dict  # name -> FrocCurve


def _scored(meta, scores, key=None):
    return [ScoredCandidate(key(c) if key else c.patient_id, c.gt_object_id, c.label, float(s))
            for c, s in zip(meta, scores)]


def run_cv(cfg: PipelineConfig, patients: list[Patient], hog_cells=None, store: FeatureStore | None = None,
           frozen: ForestModel | None = None, out_dir=None) -> dict:
    """Full cross-validation.  Returns ``{n_cells: RunOutputs}``.

    Several HOG resolutions share features, folds and candidates.
    """
    t_start = time.perf_counter()
    hog_cells = list(hog_cells or [cfg.hog_cells])
    store = store or FeatureStore(patients)
    by_id = {p.pid: p for p in patients}
    pids = sorted(by_id)
    seed = cfg.eval.seed
    folds = split_patients(pids, cfg.eval.folds, seed)
    n_objects = sum(p.n_nodes for p in patients)
    timing = {"features_s": 0.0, "candgen_s": 0.0}

    t = time.perf_counter()
    with stage("features"):
        for pid in pids:
            store[pid]
    timing["features_s"] = time.perf_counter() - t

    fold_cands = []
    t = time.perf_counter()
    for i in range(folds.k):
        train, test = folds.train_patients(i), folds.test_patients(i)
        if set(train) & set(test):
            raise DataError(f"fold {i}: patients on both sides of the split")
        with stage(f"candgen fold {i}"):
            fold_cands.append(fold_candidates(store, train, test, cfg.candgen, derive_seed(seed, 100 + i), frozen))
        log.info("fold %d: threshold %.4f", i, fold_cands[-1].threshold)
    timing["candgen_s"] = time.perf_counter() - t

    cg_stats = _candgen_stats(fold_cands, by_id)
    views = ViewSamplerConfig(k=cfg.views_k)
    results = {}
    for n in hog_cells:
        hog = HogConfig(cells_per_side=n)
        results[n] = _run_classifiers(cfg, folds, fold_cands, by_id, HogStore(by_id, hog, views), n_objects,
                                      cg_stats, dict(timing))
        results[n].timing["total_s"] = time.perf_counter() - t_start
    if out_dir is not None:
        write_outputs(results, folds, fold_cands, cfg, out_dir)
    return results


def _candgen_stats(fold_cands, by_id) -> dict:
    per_fold, hits, objects, fps, cases = [], 0, 0, 0, 0
    for fc in fold_cands:
        f_hits = f_obj = f_fp = 0
        for pid, cs in sorted(fc.test.items()):
            s = cg.candgen_sensitivity(cs, by_id[pid].mask)
            f_hits += s["n_hit"]
            f_obj += s["n_objects"]
            f_fp += s["fp_per_case"]
        per_fold.append({"threshold": fc.threshold, "calibration": fc.calibration, "n_hit": f_hits,
                         "n_objects": f_obj, "fp_per_case": f_fp / max(len(fc.test), 1)})
        hits, objects, fps, cases = hits + f_hits, objects + f_obj, fps + f_fp, cases + len(fc.test)
    return {
        "object_sensitivity": hits / objects if objects else 1.0,
        "fp_per_case": fps / max(cases, 1),
        "n_hit": hits,
        "n_objects": objects,
        "folds": per_fold,
    }


def _run_classifiers(cfg, folds, fold_cands, by_id, hogs: HogStore, n_objects, cg_stats, timing) -> RunOutputs:
    modes = MODES + ("sparse_without_intercept" if cfg.fusion.intercept else "sparse_with_intercept",)
    test_rows = {m: [] for m in modes}
    train_rows = {m: [] for m in modes}
    slice_p, slice_dec, slice_voi = [], [], []
    per_fold = []
    models = []
    t_hog = t_cls = t_score = 0.0
    n_train_volumes = 0
    for i, fc in enumerate(fold_cands):
        t = time.perf_counter()
        with stage(f"hog fold {i}"):
            Xtr, meta_tr = _gather(fc.train, hogs)
            t_hog += time.perf_counter() - t
            t = time.perf_counter()
            Xte, meta_te = _gather(fc.test, hogs)
        t_score += time.perf_counter() - t
        test_set = set(fc.test)
        if any(c.patient_id in test_set for c in meta_tr):
            raise DataError(f"fold {i}: a test patient leaked into training")
        t = time.perf_counter()
        fm, train_p = train_classifiers(Xtr, meta_tr, cfg, derive_seed(cfg.eval.seed, 200 + i), fc.inner)
        t_cls += time.perf_counter() - t
        models.append(fm)
        t = time.perf_counter()
        dec = fm.svm.decision(Xte.reshape(-1, Xte.shape[2])).reshape(Xte.shape[:2])
        test_p = sigmoid(dec) if dec.size else dec
        t_score += time.perf_counter() - t
        if len(meta_te):
            for mode, s in candidate_scores(test_p, fm.fusion, fm.fusion_alt).items():
                test_rows[mode].extend(_scored(meta_te, s))
            slice_p.append(test_p)
            slice_dec.append(dec)
            slice_voi.extend(c.label for c in meta_te)
        for mode, s in candidate_scores(train_p, fm.fusion, fm.fusion_alt).items():
            train_rows[mode].extend(_scored(meta_tr, s, key=lambda c, i=i: f"{i}:{c.patient_id}"))
        n_train_volumes += len(fc.train)
        per_fold.append({
            "fold": i,
            "train_patients": list(folds.train_patients(i)),
            "test_patients": list(folds.test_patients(i)),
            "n_train_candidates": len(meta_tr),
            "n_test_candidates": len(meta_te),
            "svm_epochs": fm.svm.epochs,
            "fusion_active": fm.fusion.n_active,
            "fusion_alt_active": fm.fusion_alt.n_active,
            "fusion_outer_iterations": fm.fusion.outer_iterations,
        })
    n_volumes = len(by_id)
    curves, froc_report = {}, {}
    for mode in modes:
        curves[mode] = froc(test_rows[mode], n_volumes, n_objects)
        froc_report[mode] = _froc_summary(curves[mode])
    train_objects = sum(by_id[p].n_nodes for fc in fold_cands for p in fc.train)
    train_report = {}
    for mode in modes:
        curves[f"train_{mode}"] = froc(train_rows[mode], n_train_volumes, train_objects)
        train_report[mode] = _froc_summary(curves[f"train_{mode}"])
    P = np.concatenate(slice_p) if slice_p else np.zeros((0, hogs.views.views_per_candidate))
    D = np.concatenate(slice_dec) if slice_dec else P
    voi = np.array(slice_voi)
    view_labels = np.repeat(voi, P.shape[1])
    pos, neg = D[voi == 1].ravel(), D[voi != 1].ravel()
    ks = ks_test(pos, neg) if len(pos) and len(neg) else None
    stats = slice_stats(P, voi) if len(voi) else {}
    report = {
        "version": REPORT_VERSION,
        "config": {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS},
        "hog_cells": hogs.hog.cells_per_side,
        "descriptor_dim": hogs.hog.descriptor_dim,
        "n_patients": n_volumes,
        "n_objects": n_objects,
        "folds": per_fold,
        "candgen": cg_stats,
        "slice": {
            "n_views": int(P.size),
            "n_positive_views": int(len(pos)),
            "auc": stats.get("auc", float("nan")),
            "ks_D": ks.D if ks else float("nan"),
            "ks_p": ks.p if ks else float("nan"),
            "per_voi_mean_pos_slices": stats.get("per_voi_mean_pos_slices", 0.0),
            "per_voi_mean_neg_slices": stats.get("per_voi_mean_neg_slices", 0.0),
        },
        "froc": froc_report,
        "train_froc": train_report,
    }
    n_test_volumes = max(sum(len(fc.test) for fc in fold_cands), 1)
    timing.update({
        "hog_s": t_hog,
        "classifiers_s": t_cls,
        "test_scoring_s": t_score,
        # test views are encoded on first sight only if no training fold saw them; this
        # is a lower bound when HOG was cached, so detect timing is reported separately
        "per_volume_test_scoring_s": t_score / n_test_volumes,
    })
    out = RunOutputs(report, timing, curves)
    out.models = models
    out.slice_points = roc_points(P.ravel(), view_labels) if 0 < (voi == 1).sum() < len(voi) else []
    return out


def _dump_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_outputs(results: dict, folds, fold_cands, cfg, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, fc in enumerate(fold_cands):
        for pid, cs in sorted(fc.test.items()):
            cg.write_candidates_csv(cs, out / "candidates" / f"p{pid}.csv")
        fdir = out / "models" / f"fold{i}"
        fdir.mkdir(parents=True, exist_ok=True)
        (fdir / "forest.json").write_text(fc.forest.to_json())
    multi = len(results) > 1
    study = []
    for n, res in results.items():
        d = out / f"hog{n}" if multi else out
        _dump_json(res.report, d / "cv_report.json")
        _dump_json({k: round(v, 3) for k, v in res.timing.items()}, d / "timing.json")
        for name, curve in res.curves.items():
            write_froc_csv(curve, d / f"froc_{name}.csv")
        write_roc_csv(res.slice_points, d / "roc_slices.csv")
        for i, fm in enumerate(res.models):
            fdir = out / "models" / f"fold{i}"
            suffix = f"_hog{n}" if multi else ""
            (fdir / f"svm{suffix}.json").write_text(fm.svm.to_json())
            (fdir / f"fusion{suffix}.json").write_text(fm.fusion.to_json())
            _dump_json({"version": REPORT_VERSION, "hog_cells": n, "views_k": cfg.views_k,
                        "fusion_mode": cfg.fusion.mode, "threshold": fold_cands[i].threshold,
                        "svm": f"svm{suffix}.json", "fusion": f"fusion{suffix}.json"},
                       fdir / f"meta{suffix}.json")
        r = res.report
        study.append([n, r["descriptor_dim"],
                      r["train_froc"][cfg.fusion.mode]["sensitivity_at"]["2"],
                      r["froc"][cfg.fusion.mode]["sensitivity_at"]["2"],
                      r["froc"][cfg.fusion.mode]["partial_auc_0_10"]])
    if multi:
        with open(out / "hog_study.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cells_per_side", "descriptor_dim", "train_sensitivity_at_2", "val_sensitivity_at_2",
                        "val_partial_auc_0_10"])
            w.writerows([[a, b, repr(c), repr(e), repr(f)] for a, b, c, e, f in study])


@dataclass
class DetectModels:
    forest: ForestModel
    svm: LinearModel
    fusion: FusionModel
    hog: HogConfig
    views: ViewSamplerConfig
    mode: str
    threshold: float


def load_models(model_dir, threshold=None, hog_cells=None) -> DetectModels:
    """Models of one fold; ``hog_cells`` picks a resolution from a multi-resolution run."""
    d = Path(model_dir)
    meta_name = "meta.json" if hog_cells is None else f"meta_hog{hog_cells}.json"
    try:
        meta = json.loads((d / meta_name).read_text())
        if meta.get("version") != REPORT_VERSION:
            raise DataError(f"unsupported model directory version {meta.get('version')!r}")
        forest = ForestModel.from_json((d / "forest.json").read_text())
        svm = LinearModel.from_json((d / meta["svm"]).read_text())
        fusion = FusionModel.from_json((d / meta["fusion"]).read_text())
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load models from {d}: {e}") from e
    hog = HogConfig(cells_per_side=int(meta["hog_cells"]))
    views = ViewSamplerConfig(k=int(meta["views_k"]))
    if svm.feature_dim != hog.descriptor_dim or fusion.n_views != views.views_per_candidate:
        raise DataError("model files disagree on descriptor or view count")
    thr = threshold if threshold is not None else meta.get("threshold", forest.operating_threshold)
    return DetectModels(forest, svm, fusion, hog, views, meta["fusion_mode"], float(thr))


def detect(models: DetectModels, image: Volume) -> list[tuple]:
    """``(x, y, z, probability)`` rows, most probable first."""
    field_ = extract_grid_features(image)
    pm = predict_probmap(models.forest, field_)
    cents = cg.generate_candidates(pm, models.threshold)
    if not cents:
        return []
    stacks = np.concatenate([view_stack(image, c, models.views) for c in cents])
    desc = encode_batch(stacks, models.hog)
    p = sigmoid(models.svm.decision(desc)).reshape(len(cents), -1)
    scores = candidate_scores(p, models.fusion)[models.mode]
    rows = [(*c, float(s)) for c, s in zip(cents, scores)]
    # ties broken by position so output order is total
    return sorted(rows, key=lambda r: (-r[3], r[0], r[1], r[2]))


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **kw)
