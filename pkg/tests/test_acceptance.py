"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 1-6 run in-process on seeded random inputs.  Criteria 7-9 drive the
CLI in subprocesses on the 24-patient synthetic benchmark (benchmark seed 0,
cross-validation seed 0).  Criterion 10 repeats every run and compares the
artifacts byte for byte.

Set VIEWAGG_ACCEPTANCE_DIR to keep the benchmark runs somewhere permanent.
"""
import csv
import json
import os
import pickle
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from viewagg import evaluation as ev
from viewagg import fusion as fu
from viewagg import hog
from viewagg.linsvm import SvmConfig, sigmoid, train_svm
from viewagg.synth import PhantomSpec, generate_phantom
from viewagg.views import ViewSamplerConfig, view_stack
from viewagg.volume import crop_window

from acceptance_log import record
from froc_cases import (
    HAND2_CANDIDATES, HAND2_OBJECTS, HAND2_POINTS, HAND2_VOLUMES, HAND_CANDIDATES, HAND_OBJECTS,
    HAND_POINTS, HAND_THRESHOLDS, HAND_VOLUMES, froc_oracle, random_candidates,
)
from svm_oracle import primal_minimum

BENCH_SEED = 0
CV_SEED = 0
N_PATIENTS = 24


# ---------------------------------------------------------------- criteria 1-6

def run_c1():
    t = time.perf_counter()
    rows = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n, d = int(rng.integers(2, 41)), int(rng.integers(1, 3))
        X = rng.normal(size=(n, d)) * rng.uniform(0.2, 3.0)
        y = np.where(X @ rng.normal(size=d) + rng.normal(scale=0.7, size=n) > 0, 1.0, -1.0)
        y[0], y[1] = 1.0, -1.0
        C = float(rng.choice([0.1, 1.0, 10.0]))
        m = train_svm(X, y, SvmConfig(C=C))
        _, f = primal_minimum(X, y, C)
        rows.append((m.primal, m.dual, f))
    elapsed = time.perf_counter() - t
    r = np.array(rows)
    rel = np.abs(r[:, 0] - r[:, 2]) / np.abs(r[:, 2])
    gap = r[:, 0] - r[:, 1]
    ok = rel.max() <= 1e-4 and gap.max() <= 1e-4 and elapsed < 10
    detail = f"max rel. primal error {rel.max():.2e}, max duality gap {gap.max():.2e}, {elapsed:.2f}s"
    return ok, detail, r


def central_gradient(f, W, h=1e-5):
    g = np.empty_like(W)
    for j in range(len(W)):
        e = np.zeros_like(W)
        e[j] = h
        g[j] = (f(W + e) - f(W - e)) / (2 * h)
    return g


def run_c2():
    t = time.perf_counter()
    errs, grads = [], []
    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        n, d = int(rng.integers(20, 200)), 27
        P = rng.uniform(size=(n, d))
        y = (rng.uniform(size=n) < 0.4).astype(float)
        W = rng.normal(scale=1.0, size=d)
        sigma = np.exp(rng.uniform(-3, 3, size=d))
        g = fu.fusion_gradient(W, P, y, sigma)
        fd = central_gradient(lambda w: fu.fusion_objective(w, P, y, sigma), W)
        errs.append(np.linalg.norm(g - fd) / np.linalg.norm(fd))
        grads.append(g)
    elapsed = time.perf_counter() - t
    ok = max(errs) <= 1e-5 and elapsed < 5
    return ok, f"max rel. gradient error {max(errs):.2e} over 50 instances, {elapsed:.2f}s", np.array(grads)


def run_c3():
    t = time.perf_counter()
    hits, weights = 0, []
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        P = rng.uniform(size=(5000, 27))
        W_true = np.zeros(27)
        support = rng.choice(27, 3, replace=False)
        W_true[support] = rng.choice([-1, 1], 3) * rng.uniform(2.0, 4.0, 3)
        y = (rng.uniform(size=5000) < sigmoid(P @ W_true)).astype(float)
        # independent coordinates: the generator's order is the model's order
        m = fu.train_fusion(P, y, sort_ascending=False)
        recovered = set(support) <= set(np.flatnonzero(~m.pruned))
        exact_zero = bool(np.all(m.W[m.pruned] == 0.0))
        hits += recovered and exact_zero
        weights.append(m.W)
    elapsed = time.perf_counter() - t
    ok = hits >= 18 and elapsed < 60
    return ok, f"{hits}/20 seeds recover the support with exact zeros, {elapsed:.1f}s", np.array(weights)


@pytest.fixture(scope="module")
def phantom_image():
    image, _ = generate_phantom(PhantomSpec(dims=(96, 96, 96), seed=4))
    return image


def run_c4(image):
    dims = {n: hog.HogConfig(cells_per_side=n).descriptor_dim for n in (3, 5, 9)}
    dims_ok = dims == {3: 279, 5: 775, 9: 2511}
    zero_ok = all(not hog.encode_hog(np.full((45, 45), c), hog.HogConfig(cells_per_side=n)).values.any()
                  for n in (3, 5, 9) for c in (0.0, 37.25, -1e3))
    rng = np.random.default_rng(4000)
    shift_ok, lo, hi, out = True, np.inf, -np.inf, []
    for i in range(60):
        n = (3, 5, 9)[i % 3]
        cfg = hog.HogConfig(cells_per_side=n)
        if i % 2:
            patch = rng.integers(-800, 800, (45, 45)).astype(float)
        else:
            c = rng.integers(0, 96, 3)
            patch = view_stack(image, tuple(c))[int(rng.integers(0, 27))]
        d = hog.encode_hog(patch, cfg).values
        shifted = hog.encode_hog(patch + float(rng.integers(-1000, 1000)), cfg).values
        shift_ok &= bool(np.array_equal(d, shifted))
        lo, hi = min(lo, d.min()), max(hi, d.max())
        out.append(d)
    bounds_ok = lo >= 0 and hi <= 0.849
    ok = dims_ok and zero_ok and shift_ok and bounds_ok
    detail = (f"dims {dims}, constant->0 {zero_ok}, shift-exact {shift_ok}, "
              f"range [{lo:.3f}, {hi:.3f}]")
    return ok, detail, out


def run_c5(image):
    cfg = ViewSamplerConfig(k=4)
    rng = np.random.default_rng(5000)
    centroids = [(48, 48, 48), (0, 0, 0), (95, 95, 95), (3, 90, 47)] + [tuple(rng.integers(0, 96, 3)) for _ in range(20)]
    count_ok, planes_ok, stacks = True, True, []
    for c in centroids:
        stack = view_stack(image, c, cfg)
        crop = crop_window(image, c, 22).data
        count_ok &= len(stack) == 27
        lay = cfg.layout()
        planes_ok &= bool(np.array_equal(stack[lay.index(("x", 0))], crop[22, :, :])
                          and np.array_equal(stack[lay.index(("y", 0))], crop[:, 22, :])
                          and np.array_equal(stack[lay.index(("z", 0))], crop[:, :, 22]))
        stacks.append(stack)
    ok = count_ok and planes_ok
    return ok, f"27 views per candidate {count_ok}, offset-0 planes equal crop planes {planes_ok} " \
               f"({len(centroids)} centroids incl. corners)", stacks


def run_c6():
    c1 = ev.froc(HAND_CANDIDATES, HAND_VOLUMES, HAND_OBJECTS)
    c2 = ev.froc(HAND2_CANDIDATES, HAND2_VOLUMES, HAND2_OBJECTS)
    hand_ok = c1.points == HAND_POINTS and c1.thresholds == HAND_THRESHOLDS and c2.points == HAND2_POINTS
    rng = np.random.default_rng(6000)
    mono_ok, oracle_ok, curves = True, True, []
    for _ in range(1000):
        cands = random_candidates(rng)
        n_obj = len({(c[0], c[1]) for c in cands if c[2] == 1}) + int(rng.integers(0, 3))
        n_vol = int(rng.integers(1, 6))
        curve = ev.froc(cands, n_vol, n_obj)
        fp, sens = curve.fp(), curve.sensitivity()
        mono_ok &= bool(np.all(np.diff(fp) >= 0) and np.all(np.diff(sens) >= 0))
        mono_ok &= bool(np.all(np.diff(curve.thresholds) < 0))
        if n_obj:
            want = froc_oracle(cands, n_vol, n_obj)
            oracle_ok &= curve.points == [(w[1], w[2]) for w in want]
        curves.append(curve.points)
    ok = hand_ok and mono_ok and oracle_ok
    return ok, f"hand cases exact {hand_ok}, 1000 fuzzed curves monotone {mono_ok}, match definition {oracle_ok}", curves


_IN_PROCESS = {}


def _first(key, fn, *args):
    if key not in _IN_PROCESS:
        _IN_PROCESS[key] = fn(*args)
    return _IN_PROCESS[key]


class TestInProcessCriteria:
    """Criteria 1-6: solver, fusion, descriptor, view and FROC contracts."""

    def test_c1_svm_matches_oracle(self):
        ok, detail, _ = _first(1, run_c1)
        record(1, "SVM oracle equivalence", ok, detail)
        assert ok, detail

    def test_c2_fusion_gradient(self):
        ok, detail, _ = _first(2, run_c2)
        record(2, "fusion gradient check", ok, detail)
        assert ok, detail

    def test_c3_fusion_support_recovery(self):
        ok, detail, _ = _first(3, run_c3)
        record(3, "fusion support recovery", ok, detail)
        assert ok, detail

    def test_c4_hog_contract(self, phantom_image):
        ok, detail, _ = _first(4, run_c4, phantom_image)
        record(4, "HOG dimensional contract", ok, detail)
        assert ok, detail

    def test_c5_view_sampling(self, phantom_image):
        ok, detail, _ = _first(5, run_c5, phantom_image)
        record(5, "view sampling contract", ok, detail)
        assert ok, detail

    def test_c6_froc(self):
        ok, detail, _ = _first(6, run_c6)
        record(6, "FROC correctness", ok, detail)
        assert ok, detail


# ---------------------------------------------------------------- benchmark runs

def cli(*args):
    t = time.perf_counter()
    r = subprocess.run([sys.executable, "-m", "viewagg.cli", *map(str, args)], capture_output=True, text=True)
    wall = time.perf_counter() - t
    if r.returncode != 0:
        pytest.fail(f"viewagg {' '.join(map(str, args[:1]))} exited {r.returncode}: {r.stderr}")
    return wall, r.stdout


def artifact_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


@dataclass
class Run:
    out: Path
    wall: float
    stdout: str

    @property
    def report(self) -> dict:
        return json.loads((self.out / "cv_report.json").read_text())

    @property
    def timing(self) -> dict:
        return json.loads((self.out / "timing.json").read_text())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    keep = os.environ.get("VIEWAGG_ACCEPTANCE_DIR")
    if not keep:
        return tmp_path_factory.mktemp("acceptance")
    root = Path(keep)
    for sub in ("bench", "bench_repeat", "cv", "cv_repeat", "study", "study_repeat", "features"):
        shutil.rmtree(root / sub, ignore_errors=True)
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="module")
def benchmark(workdir):
    cli("synth", "--patients", N_PATIENTS, "--seed", BENCH_SEED, "--out", workdir / "bench")
    # the feature cache starts empty, so this run pays for feature extraction
    wall, out = cli("cv", "--manifest", workdir / "bench" / "manifest.csv", "--seed", CV_SEED,
                    "--out", workdir / "cv", "--feature-cache", workdir / "features")
    return Run(workdir / "cv", wall, out)


@pytest.fixture(scope="module")
def study(workdir, benchmark):
    wall, out = cli("cv", "--manifest", workdir / "bench" / "manifest.csv", "--seed", CV_SEED,
                    "--out", workdir / "study", "--feature-cache", workdir / "features",
                    "--hog-cells", 3, 5, 9)
    return Run(workdir / "study", wall, out)


def read_study(path: Path) -> dict:
    with open(path) as fh:
        return {int(r["cells_per_side"]): r for r in csv.DictReader(fh)}


class TestBenchmarkCriteria:
    """Criteria 7-9 on the seeded 24-patient benchmark."""

    def test_c7_candidate_generation(self, benchmark):
        cgs = benchmark.report["candgen"]
        t = benchmark.timing
        runtime = t["features_s"] + t["candgen_s"]
        ok = cgs["object_sensitivity"] >= 0.95 and cgs["fp_per_case"] <= 40 and runtime < 300
        detail = (f"object sensitivity {cgs['object_sensitivity']:.4f} ({cgs['n_hit']}/{cgs['n_objects']}), "
                  f"{cgs['fp_per_case']:.2f} FP/case, features+candgen {runtime:.0f}s")
        record(7, "candidate-generation operating point", ok, detail)
        assert ok, detail

    def test_c8_end_to_end(self, benchmark):
        r = benchmark.report
        s, froc = r["slice"], r["froc"]
        pauc = {m: froc[m]["partial_auc_0_10"] for m in ("max", "mean", "sparse")}
        a = s["ks_p"] < 0.01
        b = s["per_voi_mean_pos_slices"] > s["per_voi_mean_neg_slices"]
        c = pauc["sparse"] >= pauc["max"] and pauc["sparse"] >= pauc["mean"]
        fast = benchmark.wall < 600
        ok = a and b and c and fast
        detail = (f"(a) KS p={s['ks_p']:.3g} D={s['ks_D']:.3f}; "
                  f"(b) slices/VOI pos {s['per_voi_mean_pos_slices']:.2f} vs neg {s['per_voi_mean_neg_slices']:.2f}; "
                  f"(c) pAUC[0,10] sparse {pauc['sparse']:.4f}, mean {pauc['mean']:.4f}, max {pauc['max']:.4f}; "
                  f"run {benchmark.wall:.0f}s")
        record(8, "end-to-end dominance", ok, detail)
        assert a, detail
        assert b, detail
        assert c, detail
        assert fast, detail

    def test_c9_hog_resolution_study(self, study):
        rows = read_study(study.out / "hog_study.csv")
        complete = sorted(rows) == [3, 5, 9] and all(
            (study.out / f"hog{n}" / "froc_sparse.csv").is_file() for n in (3, 5, 9))
        train = {n: float(rows[n]["train_sensitivity_at_2"]) for n in rows}
        val = {n: float(rows[n]["val_sensitivity_at_2"]) for n in rows}
        ordered = complete and train[9] >= train[5] >= train[3]
        ok = complete and ordered
        detail = (f"train sens@2 n3/n5/n9 = {train.get(3, 0):.4f}/{train.get(5, 0):.4f}/{train.get(9, 0):.4f}; "
                  f"validation (reported only) = {val.get(3, 0):.4f}/{val.get(5, 0):.4f}/{val.get(9, 0):.4f}; "
                  f"run {study.wall:.0f}s")
        record(9, "HOG resolution study", ok, detail)
        assert ok, detail


class TestDeterminism:
    """Criterion 10: every run repeated with the same seed gives identical bytes."""

    def test_c10_repeat_everything(self, workdir, benchmark, study, phantom_image):
        problems = []
        # in-process criteria
        again = {1: run_c1(), 2: run_c2(), 3: run_c3(), 4: run_c4(phantom_image), 5: run_c5(phantom_image),
                 6: run_c6()}
        for k, res in again.items():
            first = _first(k, *{1: (run_c1,), 2: (run_c2,), 3: (run_c3,), 4: (run_c4, phantom_image),
                                5: (run_c5, phantom_image), 6: (run_c6,)}[k])
            if pickle.dumps(first[2]) != pickle.dumps(res[2]):
                problems.append(f"criterion {k} outputs differ")
        # benchmark data, then the cross-validation and study runs on the regenerated copy
        cli("synth", "--patients", N_PATIENTS, "--seed", BENCH_SEED, "--out", workdir / "bench_repeat")
        if artifact_bytes(workdir / "bench") != artifact_bytes(workdir / "bench_repeat"):
            problems.append("benchmark volumes differ")
        manifest = workdir / "bench_repeat" / "manifest.csv"
        # no feature cache: features are recomputed from the regenerated volumes
        cli("cv", "--manifest", manifest, "--seed", CV_SEED, "--out", workdir / "cv_repeat")
        cli("cv", "--manifest", manifest, "--seed", CV_SEED, "--out", workdir / "study_repeat",
            "--hog-cells", 3, 5, 9)
        for a, b in (("cv", "cv_repeat"), ("study", "study_repeat")):
            fa, fb = artifact_bytes(workdir / a), artifact_bytes(workdir / b)
            diff = sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))
            if diff:
                problems.append(f"{a}: {len(diff)} artifacts differ, e.g. {diff[:3]}")
            elif not fa:
                problems.append(f"{a}: no artifacts")
        n_files = len(artifact_bytes(workdir / "cv")) + len(artifact_bytes(workdir / "study"))
        ok = not problems
        detail = "; ".join(problems) if problems else f"criteria 1-6 outputs, 24 volumes and {n_files} run artifacts identical"
        record(10, "determinism", ok, detail)
        assert ok, detail
