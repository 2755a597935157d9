"""Command-line front end: ``adaptseg <subcommand> ...``.

Directory layouts
-----------------
cases root      ``<root>/<case_id>/<case_id>-{t1n,t1c,t2w,t2f,seg}.nii.gz``
model outputs   ``<model_dir>/<case_id>-prob_{et,tc,wt}.nii.gz`` (flat)
label outputs   ``<pred_dir>/<case_id>.nii.gz`` (flat)

Every output gets a ``<output>.manifest.json`` (or ``manifest.json``
inside an output directory). Global options may also be given through
environment variables ``ADAPTSEG_CONFIG``, ``ADAPTSEG_THREADS``,
``ADAPTSEG_SEED`` and ``ADAPTSEG_VERBOSE``; command-line flags win.
Exit status is 0 only when no case failed; usage and fatal input errors
exit with 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, write_manifest
from .ensemble import (RegionProbabilityMaps, WeightedEnsemble, default_weights_text, load_weights_config,
                       weights_config_json, weights_from_cv)
from .metrics import LesionParams, evaluate_case, reports_to_csv, reports_to_json
from .nifti import (NamingScheme, load_case, list_case_ids, prob_map_paths, read_nifti, save_case,
                    write_nifti)
from .phantom import PhantomSpec, corpus_specs, generate
from .postprocess import (DEFAULT_RATIO_GRID, DEFAULT_SIZE_GRID, ClusterAssigner, PostprocessPolicy,
                          apply_policy, fit_policy)
from .radiomics import FeatureTable, case_features
from .stratify import DEFAULT_K_RANGE, Stratifier, assign_folds
from .volume import LabelVolume

log = logging.getLogger("adaptseg")
ENV_PREFIX = "ADAPTSEG_"


@dataclass
class PipelineConfig:
    retention: float = 0.99
    k_range: list = field(default_factory=lambda: list(DEFAULT_K_RANGE))
    n_init: int = 10
    max_iter: int = 300
    n_folds: int = 5
    bin_width: float = 25.0
    smoothing_iterations: int = 10
    threshold: float = 0.5
    size_grid: list = field(default_factory=lambda: list(DEFAULT_SIZE_GRID))
    ratio_grid: list = field(default_factory=lambda: list(DEFAULT_RATIO_GRID))
    connectivity: int = 26
    lesion: dict = field(default_factory=lambda: asdict(LesionParams()))

    def __post_init__(self):
        if not 0 < self.retention <= 1:
            raise ValueError("retention must lie in (0, 1]")
        if not self.k_range or min(self.k_range) < 2:
            raise ValueError("k_range values must be >= 2")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if 0 not in self.size_grid or 0.0 not in self.ratio_grid:
            raise ValueError("size_grid and ratio_grid must contain 0")
        self.lesion_params = LesionParams.from_dict(self.lesion)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class CaseFailures:
    def __init__(self):
        self.items = []

    def add(self, case_id, exc):
        msg = f"{case_id}: {exc}"
        log.error(msg)
        self.items.append(msg)

    def __bool__(self):
        return bool(self.items)

    def summary(self):
        if self.items:
            print(f"{len(self.items)} case(s) failed:", file=sys.stderr)
            for item in sorted(self.items):
                print(f"  {item}", file=sys.stderr)


def _map_cases(fn, items, threads):
    """Apply ``fn`` to each item; returns (item, result | exception) in input order."""
    def safe(item):
        try:
            return item, fn(item)
        except Exception as exc:  # per-case failures never abort a batch
            return item, exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(safe, items))
    return [safe(i) for i in items]


def case_dirs(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"cases root not found: {root}")
    return sorted(p for p in root.iterdir() if p.is_dir())


def pred_files(pred_dir) -> dict:
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    out = {}
    for p in sorted(pred_dir.iterdir()):
        for ext in (".nii.gz", ".nii"):
            if p.is_file() and p.name.endswith(ext):
                out.setdefault(p.name[: -len(ext)], p)
    return out


def _parse_list(text, cast):
    return [cast(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_features(args, cfg):
    preds = pred_files(args.pred) if args.mask_source == "prediction" else {}
    if args.mask_source == "prediction" and args.pred is None:
        raise ValueError("--pred is required with --mask-source prediction")

    def run(directory):
        case = load_case(directory, require_labels=args.mask_source == "ground_truth")
        if args.mask_source == "ground_truth":
            mask = case.labels.data > 0
        else:
            if case.case_id not in preds:
                raise FileNotFoundError("no prediction file")
            pred = read_nifti(preds[case.case_id], as_labels=True)
            if not case.grid.same_geometry(pred):
                raise ValueError("prediction geometry differs from the case")
            mask = pred.data > 0
        if not mask.any():
            raise ValueError("empty WT mask")
        return case_features(case, mask, cfg.bin_width, cfg.smoothing_iterations)

    failures = CaseFailures()
    vectors = []
    for directory, res in _map_cases(run, case_dirs(args.cases), args.threads):
        if isinstance(res, Exception):
            failures.add(directory.name, res)
        else:
            vectors.append(res)
    if vectors:
        atomic_write_text(args.out, FeatureTable.from_vectors(vectors).to_csv())
        write_manifest(args.out, "features", {"cases": args.cases, "pred": args.pred},
                       {"mask_source": args.mask_source, "bin_width": cfg.bin_width,
                        "smoothing_iterations": cfg.smoothing_iterations}, failures.items)
    failures.summary()
    log.info("features: %d case(s) written to %s", len(vectors), args.out)
    return 1 if failures or not vectors else 0


def cmd_stratify(args, cfg):
    table = FeatureTable.from_csv(Path(args.features).read_text())
    n_folds = args.n_folds or cfg.n_folds
    if len(table) < n_folds:
        raise ValueError(f"{len(table)} cases cannot fill {n_folds} folds")
    model = Stratifier(cfg.retention, tuple(cfg.k_range), cfg.n_init, cfg.max_iter, args.seed).fit(table)
    clusters = dict(zip(table.case_ids, (int(c) for c in model.labels_)))
    folds = assign_folds(clusters, n_folds, args.seed)
    atomic_write_text(args.out_model, model.to_json())
    atomic_write_text(args.out_folds, folds.to_json())
    folds_csv = Path(args.out_folds).with_suffix(".csv")
    atomic_write_text(folds_csv, folds.to_csv())
    params = {"retention": cfg.retention, "k_range": cfg.k_range, "n_init": cfg.n_init,
              "max_iter": cfg.max_iter, "n_folds": n_folds, "seed": args.seed}
    for out in (args.out_model, args.out_folds, folds_csv):
        write_manifest(out, "stratify", {"features": args.features}, params)
    log.info("stratify: %d PCA components, k=%d", model.pca_.n_components_, model.k_)
    return 0


def _load_model_maps(model_dirs: dict, case_id: str) -> dict:
    maps = {}
    for name, directory in model_dirs.items():
        paths = prob_map_paths(directory, case_id)
        missing = [r for r, p in paths.items() if p is None]
        if missing:
            raise FileNotFoundError(f"model {name!r} has no {'/'.join(missing)} map")
        maps[name] = RegionProbabilityMaps(*(read_nifti(paths[r]) for r in ("et", "tc", "wt")), model_name=name)
    return maps


def cmd_ensemble(args, cfg):
    model_dirs = dict(item.split("=", 1) for item in args.model)
    weights_text = Path(args.weights).read_text() if args.weights else default_weights_text()
    weights, threshold = load_weights_config(weights_text)
    if args.threshold is not None:
        threshold = args.threshold
    if set(weights) != set(model_dirs):
        raise ValueError(f"weights name models {sorted(weights)} but outputs were given for {sorted(model_dirs)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    estimator = WeightedEnsemble(dict(weights), threshold).fit()
    case_ids = sorted(set().union(*(list_case_ids(d) for d in model_dirs.values())))

    def run(case_id):
        maps = _load_model_maps(model_dirs, case_id)
        probs = estimator.transform(maps)
        labels = LabelVolume(estimator.predict(maps), probs.et.affine)
        write_nifti(labels, out / f"{case_id}.nii.gz")
        if args.save_probs:
            for region in ("et", "tc", "wt"):
                grid = getattr(probs, region)
                write_nifti(grid.with_data(grid.data.astype(np.float32)), out / f"{case_id}-prob_{region}.nii.gz")
        return case_id

    failures = CaseFailures()
    for case_id, res in _map_cases(run, case_ids, args.threads):
        if isinstance(res, Exception):
            failures.add(case_id, res)
    write_manifest(out, "ensemble", {**{f"model:{k}": v for k, v in model_dirs.items()}, "weights": args.weights},
                   {"weights": dict(weights), "threshold": threshold}, failures.items)
    failures.summary()
    return 1 if failures else 0


def cmd_weights_from_cv(args, cfg):
    scores = {}
    if args.scores:
        scores.update(json.loads(Path(args.scores).read_text()))
    for item in args.score or []:
        name, values = item.split("=", 1)
        scores[name] = _parse_list(values, float)
    if not scores:
        raise ValueError("no scores given (use --scores FILE or --score NAME=v1,v2,...)")
    weights = weights_from_cv(scores)
    text = weights_config_json(weights, cfg.threshold, {"derivation": "weight_i = mean_dice_i / sum(mean_dice)"})
    atomic_write_text(args.out, text)
    write_manifest(args.out, "weights-from-cv", {"scores": args.scores}, {"scores": scores})
    for name, w in weights.items():
        print(f"{name}\t{w:.4f}")
    return 0


def _pred_case_pairs(pred_dir, cases_root, failures):
    preds = pred_files(pred_dir)
    cases = {d.name: d for d in case_dirs(cases_root)}
    for cid in sorted(set(preds) ^ set(cases)):
        where = "prediction" if cid in preds else "cases root"
        failures.add(cid, f"present only in {where}")
    return [(cid, preds[cid], cases[cid]) for cid in sorted(set(preds) & set(cases))]


def cmd_fit_postprocess(args, cfg):
    stratifier = Stratifier.from_json(Path(args.model).read_text())
    assigner = ClusterAssigner(
        stratifier, lambda case, m: case_features(case, m, cfg.bin_width, cfg.smoothing_iterations))
    failures = CaseFailures()
    pairs = _pred_case_pairs(args.pred, args.cases, failures)

    def run(item):
        cid, pred_path, case_dir = item
        case = load_case(case_dir, require_labels=True)
        pred = read_nifti(pred_path, as_labels=True)
        if not case.grid.same_geometry(pred):
            raise ValueError("prediction geometry differs from the case")
        return pred.data, case.labels.data, assigner.assign(case, pred.data), case.grid.spacing

    fit_cases = []
    for item, res in _map_cases(run, pairs, args.threads):
        if isinstance(res, Exception):
            failures.add(item[0], res)
        else:
            log.info("%s: cluster %s", item[0], res[2])
            fit_cases.append(res)
    size_grid = _parse_list(args.size_grid, int) if args.size_grid else cfg.size_grid
    ratio_grid = _parse_list(args.ratio_grid, float) if args.ratio_grid else cfg.ratio_grid
    policy, scores = fit_policy(fit_cases, size_grid, ratio_grid, n_clusters=stratifier.n_clusters_,
                                params=cfg.lesion_params, connectivity=cfg.connectivity, return_scores=True)
    atomic_write_text(args.out, policy.to_json())
    for c, s in sorted(scores.items()):
        print(f"cluster {c}: n={s['n_cases']} mean lesion-wise Dice {s['before']:.4f} -> {s['after']:.4f}")
    write_manifest(args.out, "fit-postprocess",
                   {"pred": args.pred, "cases": args.cases, "model": args.model},
                   {"size_grid": size_grid, "ratio_grid": ratio_grid, "lesion": asdict(cfg.lesion_params),
                    "connectivity": cfg.connectivity, "scores": {str(k): v for k, v in scores.items()}},
                   failures.items)
    failures.summary()
    return 1 if failures else 0


def cmd_postprocess(args, cfg):
    policy = PostprocessPolicy.from_json(Path(args.policy).read_text())
    stratifier = Stratifier.from_json(Path(args.model).read_text())
    assigner = ClusterAssigner(
        stratifier, lambda case, m: case_features(case, m, cfg.bin_width, cfg.smoothing_iterations))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = CaseFailures()
    pairs = _pred_case_pairs(args.pred, args.cases, failures)

    def run(item):
        cid, pred_path, case_dir = item
        pred = read_nifti(pred_path, as_labels=True)
        cluster = assigner.assign(load_case(case_dir), pred.data) if pred.data.any() else None
        result = apply_policy(pred.data, cluster, policy)
        write_nifti(pred.with_data(result), out / pred_path.name)
        return cluster

    rows = ["case_id,cluster"]
    for item, res in _map_cases(run, pairs, args.threads):
        if isinstance(res, Exception):
            failures.add(item[0], res)
        else:
            log.info("%s: cluster %s", item[0], "empty" if res is None else res)
            rows.append(f"{item[0]},{'empty' if res is None else res}")
    atomic_write_text(out / "clusters.csv", "\n".join(rows) + "\n")
    write_manifest(out, "postprocess",
                   {"pred": args.pred, "cases": args.cases, "policy": args.policy, "model": args.model},
                   {"bin_width": cfg.bin_width, "smoothing_iterations": cfg.smoothing_iterations}, failures.items)
    failures.summary()
    return 1 if failures else 0


def cmd_evaluate(args, cfg):
    params = cfg.lesion_params
    failures = CaseFailures()
    preds = pred_files(args.pred)
    gts = {}
    for d in case_dirs(args.gt):
        seg = NamingScheme().find(d, d.name, NamingScheme().labels)
        if seg is not None:
            gts[d.name] = seg
    for cid in sorted(set(preds) ^ set(gts)):
        failures.add(cid, f"present only in {'predictions' if cid in preds else 'ground truth'}")

    def run(cid):
        gt = read_nifti(gts[cid], as_labels=True)
        pred = read_nifti(preds[cid], as_labels=True)
        if gt.dims != pred.dims:
            raise ValueError(f"dims mismatch {gt.dims} vs {pred.dims}")
        return evaluate_case(gt.data, pred.data, gt.spacing, params, case_id=cid)

    reports = []
    for cid, res in _map_cases(run, sorted(set(preds) & set(gts)), args.threads):
        if isinstance(res, Exception):
            failures.add(cid, res)
        else:
            reports.append(res)
    atomic_write_text(args.out, reports_to_csv(reports, params))
    json_out = Path(args.out_json) if args.out_json else Path(args.out).with_suffix(".json")
    atomic_write_text(json_out, reports_to_json(reports, params))
    for out in (args.out, json_out):
        write_manifest(out, "evaluate", {"pred": args.pred, "gt": args.gt}, {"lesion": asdict(params)},
                       failures.items)
    failures.summary()
    return 1 if failures else 0


def cmd_phantom(args, cfg):
    out = Path(args.out)
    models = tuple(args.models or ())
    if models and not args.probs_out:
        raise ValueError("--probs-out is required with --models")
    overrides = {"prob_models": models}
    if args.dims:
        overrides["dims"] = tuple(_parse_list(args.dims, int))
    specs = corpus_specs(args.n_cases, args.seed, **overrides)
    for i, spec in enumerate(specs):
        case = generate(spec, case_id=f"PHANTOM-{i:05d}")
        save_case(case, out)
        for model, maps in case.prob_maps.items():
            mdir = Path(args.probs_out) / model
            mdir.mkdir(parents=True, exist_ok=True)
            for region in ("et", "tc", "wt"):
                write_nifti(getattr(maps, region), mdir / f"{case.case_id}-prob_{region}.nii.gz")
    write_manifest(out, "phantom", {}, {"n_cases": args.n_cases, "seed": args.seed, "models": list(models),
                                        "specs": [asdict(s) for s in specs]})
    if args.probs_out:
        write_manifest(Path(args.probs_out), "phantom", {}, {"n_cases": args.n_cases, "seed": args.seed})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptseg", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"adaptseg {__version__}")
    p.add_argument("--config", default=os.environ.get(ENV_PREFIX + "CONFIG"), help="pipeline config JSON")
    p.add_argument("--threads", type=int, default=int(os.environ.get(ENV_PREFIX + "THREADS", 1)))
    p.add_argument("--seed", type=int, default=int(os.environ.get(ENV_PREFIX + "SEED", 0)))
    p.add_argument("--verbose", "-v", action="store_true",
                   default=os.environ.get(ENV_PREFIX + "VERBOSE", "") not in ("", "0"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("features", help="radiomic feature table of the WT per case")
    s.add_argument("--cases", required=True)
    s.add_argument("--mask-source", choices=("ground_truth", "prediction"), default="ground_truth")
    s.add_argument("--pred", help="label predictions (for --mask-source prediction)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("stratify", help="fit clustering and assign stratified folds")
    s.add_argument("--features", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--out-folds", required=True)
    s.add_argument("--n-folds", type=int)
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("ensemble", help="weighted ensembling of model probability maps")
    s.add_argument("--model", action="append", required=True, metavar="NAME=DIR")
    s.add_argument("--weights", help="weights JSON (default: packaged 0.4722/0.5278 file)")
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--save-probs", action="store_true")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("weights-from-cv", help="ensemble weights from per-model CV Dice")
    s.add_argument("--scores", help='JSON {"model": [fold dice, ...], ...}')
    s.add_argument("--score", action="append", metavar="NAME=V1,V2,...")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weights_from_cv)

    s = sub.add_parser("fit-postprocess", help="grid-search per-cluster post-processing thresholds")
    s.add_argument("--pred", required=True)
    s.add_argument("--cases", required=True, help="cases root with images and ground truth")
    s.add_argument("--model", required=True, help="stratification model fitted on predicted WT")
    s.add_argument("--size-grid")
    s.add_argument("--ratio-grid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_postprocess)

    s = sub.add_parser("postprocess", help="apply a post-processing policy")
    s.add_argument("--pred", required=True)
    s.add_argument("--cases", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("evaluate", help="lesion-wise and volumetric metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True, help="cases root with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--out-json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("phantom", help="write a synthetic BraTS-shaped corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-cases", type=int, default=1)
    s.add_argument("--models", nargs="*")
    s.add_argument("--probs-out")
    s.add_argument("--dims", help="e.g. 48,48,40")
    s.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
        return args.func(args, cfg)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
