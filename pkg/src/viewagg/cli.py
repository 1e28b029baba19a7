"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 convergence failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import candgen as cg
from .errors import ConvergenceError, DataError, ViewAggError
from .forest import ForestModel
from .hog import HogConfig, encode_batch, render_weights
from .linsvm import LinearModel
from .pipeline import (
    MODES, FeatureStore, PipelineConfig, detect, fold_candidates, load_manifest, load_models,
    run_cv, derive_seed, stage,
)
from .evaluation import split_patients
from .synth import PhantomSpec, generate_benchmark
from .views import ViewSamplerConfig, montage, view_stack
from .volume import Volume, load_volume, save_volume

log = logging.getLogger("viewagg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global(p):
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewagg", description="multi-view lymph-node style candidate detection pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    _global(p)
    p.add_argument("--patients", type=int, default=24)
    p.add_argument("--phantom", help="JSON file with phantom parameters")

    for name, helptext in (("candgen", "train candidate generation per fold and write candidates"),
                           ("cv", "patient-level cross-validation of the full pipeline")):
        p = sub.add_parser(name, help=helptext)
        _global(p)
        p.add_argument("--manifest", help="dataset manifest.csv")
        p.add_argument("--folds", type=int)
        p.add_argument("--threshold", type=float, help="fixed candidate threshold instead of calibration")
        p.add_argument("--frozen-candgen", metavar="FOREST_JSON", help="use this forest for every fold")
        p.add_argument("--feature-cache", help="directory for cached grid features")
        if name == "cv":
            p.add_argument("--fusion", choices=MODES)
            p.add_argument("--hog-cells", type=int, nargs="+", help="one or more cells-per-side values")
            p.add_argument("--k", type=int, help="view offset radius")

    p = sub.add_parser("detect", help="score one volume with trained models")
    _global(p)
    p.add_argument("--models", required=True, help="model directory (one CV fold)")
    p.add_argument("--image", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--hog-cells", type=int, help="resolution to use when the fold holds several")

    for name in ("dump-views", "dump-hog"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} of one candidate")
        _global(p)
        p.add_argument("--image", required=True)
        p.add_argument("--centroid", type=int, nargs=3, required=True, metavar=("X", "Y", "Z"))
        p.add_argument("--k", type=int, default=4)
        if name == "dump-hog":
            p.add_argument("--hog-cells", type=int, default=5)

    p = sub.add_parser("render-weights", help="draw SVM weights as oriented glyphs")
    _global(p)
    p.add_argument("--svm", required=True, help="svm.json")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    ev, cand, fus = cfg.eval, cfg.candgen, cfg.fusion
    if args.seed is not None:
        ev = replace(ev, seed=args.seed)
    if getattr(args, "folds", None):
        ev = replace(ev, folds=args.folds)
    if getattr(args, "threshold", None) is not None:
        cand = replace(cand, threshold=args.threshold)
    if getattr(args, "fusion", None):
        fus = replace(fus, mode=args.fusion)
    kw = {"eval": ev, "candgen": cand, "fusion": fus}
    if getattr(args, "manifest", None):
        kw["manifest"] = args.manifest
    if args.out:
        kw["out_dir"] = args.out
    if getattr(args, "k", None) is not None:
        kw["views_k"] = args.k
    if getattr(args, "hog_cells", None):
        kw["hog_cells"] = args.hog_cells[0]
    return replace(cfg, **kw)


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def cmd_synth(args) -> int:
    out = _need_out(args)
    spec = PhantomSpec.from_dict(json.loads(Path(args.phantom).read_text())) if args.phantom else PhantomSpec()
    if args.patients < 1:
        raise UsageError("--patients must be positive")
    generate_benchmark(args.patients, spec, args.seed if args.seed is not None else 0, out)
    print(f"wrote {args.patients} patients to {out}")
    return 0


def _patients(cfg):
    if not cfg.manifest:
        raise UsageError("a manifest is required (--manifest or config 'manifest')")
    return load_manifest(cfg.manifest)


def _frozen(args):
    if not args.frozen_candgen:
        return None
    try:
        return ForestModel.from_json(Path(args.frozen_candgen).read_text())
    except OSError as e:
        raise DataError(f"cannot read frozen forest: {e}") from e


def cmd_candgen(args) -> int:
    out = _need_out(args)
    cfg = _config(args)
    patients = _patients(cfg)
    store = FeatureStore(patients, args.feature_cache)
    by_id = {p.pid: p for p in patients}
    folds = split_patients(sorted(by_id), cfg.eval.folds, cfg.eval.seed)
    frozen = _frozen(args)
    hits = objects = fps = 0
    rows = []
    for i in range(folds.k):
        with stage(f"candgen fold {i}"):
            fc = fold_candidates(store, folds.train_patients(i), folds.test_patients(i), cfg.candgen,
                                 derive_seed(cfg.eval.seed, 100 + i), frozen)
        (out / "models" / f"fold{i}").mkdir(parents=True, exist_ok=True)
        (out / "models" / f"fold{i}" / "forest.json").write_text(fc.forest.to_json())
        for pid, cs in sorted(fc.test.items()):
            cg.write_candidates_csv(cs, out / "candidates" / f"p{pid}.csv")
            s = cg.candgen_sensitivity(cs, by_id[pid].mask)
            hits, objects, fps = hits + s["n_hit"], objects + s["n_objects"], fps + s["fp_per_case"]
            rows.append([pid, i, repr(fc.threshold), len(cs), s["n_hit"], s["n_objects"], s["fp_per_case"]])
    rows.sort()
    with open(out / "candgen_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "fold", "threshold", "n_candidates", "n_hit", "n_objects", "fp"])
        w.writerows(rows)
    sens = hits / objects if objects else 1.0
    print(f"object sensitivity {sens:.4f} ({hits}/{objects}), FP/case {fps / len(patients):.2f}")
    return 0


def cmd_cv(args) -> int:
    out = _need_out(args)
    cfg = _config(args)
    patients = _patients(cfg)
    t = time.perf_counter()
    results = run_cv(cfg, patients, hog_cells=args.hog_cells, store=FeatureStore(patients, args.feature_cache),
                     frozen=_frozen(args), out_dir=out)
    for n, res in results.items():
        r = res.report
        parts = [f"{m} pAUC {r['froc'][m]['partial_auc_0_10']:.4f}" for m in MODES]
        print(f"hog n={n}: slice AUC {r['slice']['auc']:.4f}, KS p {r['slice']['ks_p']:.3g}, " + ", ".join(parts))
    print(f"candgen sensitivity {results[next(iter(results))].report['candgen']['object_sensitivity']:.4f}; "
          f"total {time.perf_counter() - t:.1f}s")
    return 0


def cmd_detect(args) -> int:
    out = _need_out(args)
    models = load_models(args.models, args.threshold, args.hog_cells)
    image = load_volume(args.image)
    rows = detect(models, image)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "detections.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "probability"])
        w.writerows([[x, y, z, repr(p)] for x, y, z, p in rows])
    print(f"{len(rows)} detections")
    return 0


def write_pgm(img: np.ndarray, path) -> None:
    """8-bit binary PGM, intensities stretched to the full range."""
    a = np.asarray(img, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    g = np.zeros(a.shape, np.uint8) if hi == lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        fh.write(g.tobytes())


def cmd_dump_views(args) -> int:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ViewSamplerConfig(k=args.k)
    stack = view_stack(load_volume(args.image), tuple(args.centroid), cfg)
    save_volume(Volume(np.moveaxis(stack, 0, -1)), out / "views.vaggvol")
    write_pgm(montage(stack, cfg.k), out / "montage.pgm")
    print(f"{len(stack)} views")
    return 0


def cmd_dump_hog(args) -> int:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    vcfg, hcfg = ViewSamplerConfig(k=args.k), HogConfig(cells_per_side=args.hog_cells)
    desc = encode_batch(view_stack(load_volume(args.image), tuple(args.centroid), vcfg), hcfg)
    with open(out / "hog.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "offset"] + [f"f{j}" for j in range(hcfg.descriptor_dim)])
        for (axis, off), d in zip(vcfg.layout(), desc):
            w.writerow([axis, off] + [repr(float(v)) for v in d])
    print(f"{len(desc)} descriptors of length {hcfg.descriptor_dim}")
    return 0


def cmd_render_weights(args) -> int:
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    try:
        m = LinearModel.from_json(Path(args.svm).read_text())
    except OSError as e:
        raise DataError(f"cannot read {args.svm}: {e}") from e
    n = round((m.feature_dim / 31) ** 0.5)
    cfg = HogConfig(cells_per_side=n)
    if cfg.descriptor_dim != m.feature_dim:
        raise DataError(f"svm feature_dim {m.feature_dim} is not a HOG descriptor length")
    v = render_weights(m.omega[: m.feature_dim], cfg)
    save_volume(v, out / "weights.vaggvol")
    write_pgm(v.data[..., 0] - v.data[..., 1], out / "weights.pgm")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "candgen": cmd_candgen,
    "cv": cmd_cv,
    "detect": cmd_detect,
    "dump-views": cmd_dump_views,
    "dump-hog": cmd_dump_hog,
    "render-weights": cmd_render_weights,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except ConvergenceError as e:
        print(f"convergence failure: {e}", file=sys.stderr)
        return e.exit_code
    except ViewAggError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
