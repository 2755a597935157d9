"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""

import filecmp
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from conftest import blob_mask, random_labels
from adaptseg.ensemble import RegionProbabilityMaps, ensemble, weights_from_cv
from adaptseg.metrics import LesionParams, lesion_wise, volumetric_dice, volumetric_hd95
from adaptseg.nifti import read_nifti, write_nifti
from adaptseg.postprocess import PostprocessPolicy, apply_policy, fit_policy, reference_policy
from adaptseg.radiomics import (FIRST_ORDER_NAMES, SHAPE_NAMES, TEXTURE_FAMILIES, feature_names,
                                intensity_features, shape_features, texture_features)
from adaptseg.stratify import PCA, assign_folds, select_k
from adaptseg.volume import VoxelGrid, connected_components, regions_from_labels


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[ACCEPTANCE] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return emit


def test_metric_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    n_volumes, dice_mismatch, worst, impl_time = 0, 0, 0.0, 0.0
    for i in range(520):
        n = int(rng.integers(3, 13))
        gt = blob_mask(rng, (n, n, n), n_seeds=int(rng.integers(0, 4)), iterations=int(rng.integers(1, 3)))
        if i % 4 == 0:
            pred = gt ^ (rng.random(gt.shape) < 0.04)
        else:
            pred = blob_mask(rng, (n, n, n), n_seeds=int(rng.integers(0, 4)), iterations=int(rng.integers(1, 3)))
        sp = tuple(float(x) for x in rng.choice([0.7, 1.0, 1.2], 3))
        t0 = time.perf_counter()
        lw = lesion_wise(gt, pred, sp, LesionParams())
        vd = volumetric_dice(gt, pred)
        vh = volumetric_hd95(gt, pred, sp)
        impl_time += time.perf_counter() - t0
        ref_d, ref_h = oracles.lesion_wise(gt, pred, sp)
        dice_mismatch += (lw.dice != ref_d) + (vd != oracles.dice(gt, pred))
        worst = max(worst, abs(lw.hd95 - ref_h), abs(vh - oracles.volumetric_hd95(gt, pred, sp)))
        n_volumes += 1
    ok = n_volumes >= 500 and dice_mismatch == 0 and worst <= 1e-9 and impl_time < 60
    report("metric oracle equivalence", ok,
           f"{n_volumes} volumes, dice mismatches={dice_mismatch}, max distance error={worst:.2e}, "
           f"runtime={impl_time:.1f}s (<60s)")


def test_connected_components_oracle(report):
    t0 = time.perf_counter()
    mismatches, checked = 0, 0
    for bits in range(2 ** 12):
        m = np.array([(bits >> i) & 1 for i in range(12)], dtype=bool).reshape(2, 2, 3)
        for conn in (6, 18, 26):
            ref, _ = oracles.union_find_components(m, conn)
            mismatches += not np.array_equal(connected_components(m, conn).labels, ref)
            checked += 1
    rng = np.random.default_rng(7)
    for i in range(500):
        m = rng.random((12, 12, 12)) < rng.uniform(0.05, 0.5)
        conn = (6, 18, 26)[i % 3]
        ref, _ = oracles.union_find_components(m, conn)
        mismatches += not np.array_equal(connected_components(m, conn).labels, ref)
        checked += 1
    elapsed = time.perf_counter() - t0
    report("connected components", mismatches == 0 and elapsed < 30,
           f"{checked} labelings, mismatches={mismatches}, runtime={elapsed:.1f}s (<30s)")


def test_radiomics(report):
    rng = np.random.default_rng(11)
    arities = (len(SHAPE_NAMES), len(FIRST_ORDER_NAMES), sum(map(len, TEXTURE_FAMILIES.values())),
               len(FIRST_ORDER_NAMES) + sum(map(len, TEXTURE_FAMILIES.values())), len(feature_names()))
    arity_ok = arities == (14, 18, 75, 93, 386)

    worst_rel = 0.0
    for _ in range(30):
        n = int(rng.integers(2, 7))
        mask = blob_mask(rng, (n, n, n), n_seeds=3, iterations=2)
        if not mask.any():
            mask[0, 0, 0] = True
        image = rng.integers(0, int(rng.integers(1, 7)), mask.shape) * 25.0 + rng.uniform(0, 25, mask.shape)
        got = texture_features(image, mask)
        ref = oracles.texture_features(image, mask, 25.0)
        for k in got:
            worst_rel = max(worst_rel, abs(got[k] - ref[k]) / max(abs(ref[k]), 1e-3))
    texture_ok = worst_rel <= 1e-9

    g = (np.indices((25, 25, 25)) - 12.0)
    sphericity = shape_features((g ** 2).sum(0) <= 100)["Sphericity"]
    sphere_ok = 0.97 <= sphericity <= 1.0

    invariance_failures = 0
    for _ in range(100):
        mask = blob_mask(rng, (7, 7, 7), n_seeds=3, iterations=2)
        if not mask.any():
            mask[3, 3, 3] = True
        image = np.round(rng.normal(300, 80, mask.shape))
        base = {**shape_features(mask), **intensity_features(image, mask)}
        shift = rng.integers(0, 4, 3)
        big_i, big_m = np.zeros((11, 11, 11)), np.zeros((11, 11, 11), bool)
        sl = tuple(slice(s, s + 7) for s in shift)
        big_i[sl], big_m[sl] = image, mask
        moved = {**shape_features(big_m), **intensity_features(big_i, big_m)}
        invariance_failures += any(not math.isclose(base[k], moved[k], rel_tol=1e-12, abs_tol=1e-12) for k in base)
        c = float(rng.integers(-1000, 1000))
        shifted = intensity_features(image + c, mask)
        for k, v in shifted.items():
            name = k.split(".")[-1]
            if not k.startswith("firstorder.") or name in ("Variance", "Entropy", "Uniformity"):
                invariance_failures += not math.isclose(v, base[k], rel_tol=1e-9, abs_tol=1e-12)
            elif name in ("Mean", "Median", "Minimum", "Maximum"):
                invariance_failures += not math.isclose(v - base[k], c, rel_tol=1e-9, abs_tol=1e-9)
    report("radiomics", arity_ok and texture_ok and sphere_ok and invariance_failures == 0,
           f"arities={arities}, texture max rel err={worst_rel:.1e}, sphericity={sphericity:.4f}, "
           f"invariance failures={invariance_failures}/100 fixtures")


def _separated_centers(rng, k, dim, min_dist):
    # rejection sampling: random positions, but no two blobs closer than min_dist noise sigmas
    while True:
        c = rng.uniform(-20, 20, (k, dim))
        if min(np.linalg.norm(c[a] - c[b]) for a in range(k) for b in range(a + 1, k)) >= min_dist:
            return c


def test_stratification(report):
    rng = np.random.default_rng(5)
    pca_ok = True
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(10, 60)), int(rng.integers(2, 30)))) * rng.uniform(0.1, 10)
        p = PCA(0.99).fit(X)
        C = p.components_
        pca_ok &= p.explained_variance_ratio_.sum() >= 0.99 - 1e-12
        pca_ok &= bool(np.abs(C @ C.T - np.eye(len(C))).max() <= 1e-8)

    hits = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        centers = _separated_centers(r, 3, 5, min_dist=12.0)
        X = np.concatenate([c + r.normal(0, 1, (15, 5)) for c in centers])
        k, _, _ = select_k(X, range(2, 9), n_init=10, random_state=seed)
        hits += k == 3

    balance_ok = True
    for seed in range(300):
        r = np.random.default_rng(seed)
        clusters = {f"c{i}": int(r.integers(0, r.integers(1, 9))) for i in range(int(r.integers(1, 80)))}
        fa = assign_folds(clusters, int(r.integers(2, 8)), seed)
        balance_ok &= all(max(c) - min(c) <= 1 for c in fa.fold_counts().values())
    report("stratification", pca_ok and hits >= 95 and balance_ok,
           f"PCA retention/orthonormality ok={pca_ok}, select_k recovered k=3 in {hits}/100 runs, "
           f"fold balance ok={balance_ok}")


def test_ensemble(report):
    rng = np.random.default_rng(1)
    a = RegionProbabilityMaps.from_arrays(*(rng.random((8, 8, 8)) for _ in range(3)), model_name="nnunet")
    b = RegionProbabilityMaps.from_arrays(*(rng.random((8, 8, 8)) for _ in range(3)), model_name="mednext")
    out = ensemble([a, b], {"nnunet": 1.0, "mednext": 0.0})
    identity = all(x.tobytes() == y.tobytes() for x, y in zip(out.arrays(), a.arrays()))
    pn = RegionProbabilityMaps.from_arrays(*[np.full((1, 1, 1), 0.8)] * 3, model_name="nnunet")
    pm = RegionProbabilityMaps.from_arrays(*[np.full((1, 1, 1), 0.6)] * 3, model_name="mednext")
    value = float(ensemble([pn, pm], {"nnunet": 0.4722, "mednext": 0.5278}).et.data[0, 0, 0])
    w = weights_from_cv({"nnunet": 0.895, "mednext": 1.0})
    cv_ok = abs(w["nnunet"] - 0.4722) <= 5e-4 and abs(w["mednext"] - 0.5278) <= 5e-4
    cv_ok &= abs(w["nnunet"] - 0.4723) <= 5e-5 and abs(w["mednext"] - 0.5277) <= 5e-5
    report("ensemble", identity and abs(value - 0.69444) <= 1e-12 and cv_ok,
           f"(1,0) bit-exact={identity}, worked voxel={value!r}, "
           f"cv weights=({w['nnunet']:.4f}, {w['mednext']:.4f})")


def _planted_case(rng):
    gt = np.zeros((32, 32, 32), np.uint8)
    c = rng.integers(8, 14, 3)
    gt[c[0] - 5:c[0] + 5, c[1] - 5:c[1] + 5, c[2] - 5:c[2] + 5] = 2
    gt[c[0] - 3:c[0] + 3, c[1] - 3:c[1] + 3, c[2] - 3:c[2] + 3] = 1
    gt[c[0] - 2:c[0] + 2, c[1] - 2:c[1] + 2, c[2] - 2:c[2] + 2] = 3
    pred = gt.copy()
    lo = rng.integers(22, 27, 3)
    pred[lo[0]:lo[0] + 3, lo[1]:lo[1] + 5, lo[2]:lo[2] + 2] = 3  # 30-voxel false positive
    return pred, gt


def _objective(cases, policy):
    vals = []
    for pred, gt, c in cases:
        g, p = regions_from_labels(gt).as_dict(), regions_from_labels(apply_policy(pred, c, policy)).as_dict()
        vals.append(np.mean([lesion_wise(g[r], p[r]).dice for r in ("ET", "TC", "WT")]))
    return float(np.mean(vals))


def test_postprocessing(report):
    reference_table = {0: (0, 0, 0, 0.0), 1: (0, 0, 50, 0.0), 2: (0, 0, 100, 0.0), 3: (0, 200, 0, 0.0),
              4: (0, 0, 50, 0.0), 5: (0, 50, 0, 0.0), 6: (0, 0, 0, 0.1), 7: (0, 0, 0, 0.0), 8: (0, 0, 0, 0.0)}
    ref = reference_policy()
    got = {c: (*(p.lesion_thresholds[lb] for lb in (1, 2, 3)), p.et_wt_threshold) for c, p in ref.clusters.items()}
    verbatim = got == reference_table

    rng = np.random.default_rng(3)
    zero_ok, idem_ok = True, True
    for i in range(200):
        lab = random_labels(rng, tuple(int(x) for x in rng.integers(4, 12, 3)), float(rng.uniform(0.05, 0.6)))
        zero = PostprocessPolicy.all_zero(3)
        zero_ok &= apply_policy(lab, i % 3, zero).tobytes() == lab.tobytes()
        if i % 2:
            pol, c = ref, i % 9
        else:
            t = rng.choice([0, 2, 5, 10, 25], 3)
            from adaptseg.postprocess import ClusterPolicy
            pol, c = PostprocessPolicy({0: ClusterPolicy(dict(zip((1, 2, 3), t)),
                                                         float(rng.choice([0.0, 0.1, 0.3, 0.6])))}), 0
        once = apply_policy(lab, c, pol)
        idem_ok &= np.array_equal(apply_policy(once, c, pol), once)

    planted = [(*_planted_case(rng), 0) for _ in range(6)]
    pol = fit_policy(planted, n_clusters=1)
    before, after = _objective(planted, PostprocessPolicy.all_zero(1)), _objective(planted, pol)
    improves = after > before and pol.clusters[0].lesion_thresholds[3] == 50

    never_worse = True
    for _ in range(10):
        sets = []
        for j in range(4):
            gt = random_labels(rng, (10, 10, 10), 0.08)
            pred = gt.copy()
            noise = rng.random(gt.shape) < 0.04
            pred[noise] = rng.integers(1, 4, noise.sum())
            sets.append((pred, gt, j % 2))
        fitted = fit_policy(sets, size_grid=(0, 2, 4, 8), ratio_grid=(0.0, 0.1, 0.3), n_clusters=2)
        never_worse &= _objective(sets, fitted) >= _objective(sets, PostprocessPolicy.all_zero(2)) - 1e-12
    report("post-processing", verbatim and zero_ok and idem_ok and improves and never_worse,
           f"reference table verbatim={verbatim} (27 sizes + 9 ratios), all-zero identity={zero_ok}, "
           f"idempotent on 200 fixtures={idem_ok}, planted blob Dice {before:.4f}->{after:.4f} "
           f"(ET threshold {pol.clusters[0].lesion_thresholds[3]}), never degrades={never_worse}")


def _pipeline(root):
    def cli(*args):
        return subprocess.run([sys.executable, "-m", "adaptseg", *map(str, args)],
                              capture_output=True, text=True).returncode

    probs = root / "probs"
    steps = [
        ("phantom", ["--seed", 0, "phantom", "--out", root / "cases", "--n-cases", 20,
                     "--models", "nnunet", "mednext", "--probs-out", probs]),
        ("features", ["features", "--cases", root / "cases", "--out", root / "features.csv"]),
        ("stratify", ["stratify", "--features", root / "features.csv", "--n-folds", 5,
                      "--out-model", root / "strat.json", "--out-folds", root / "folds.json"]),
        ("ensemble", ["ensemble", "--model", f"nnunet={probs / 'nnunet'}", "--model", f"mednext={probs / 'mednext'}",
                      "--out", root / "pred"]),
        ("features(pred)", ["features", "--cases", root / "cases", "--mask-source", "prediction",
                            "--pred", root / "pred", "--out", root / "pred_features.csv"]),
        ("stratify(pred)", ["stratify", "--features", root / "pred_features.csv",
                            "--out-model", root / "pp_model.json", "--out-folds", root / "pp_folds.json"]),
        ("fit-postprocess", ["fit-postprocess", "--pred", root / "pred", "--cases", root / "cases",
                             "--model", root / "pp_model.json", "--out", root / "policy.json"]),
        ("postprocess", ["postprocess", "--pred", root / "pred", "--cases", root / "cases",
                         "--policy", root / "policy.json", "--model", root / "pp_model.json", "--out", root / "post"]),
        ("evaluate", ["evaluate", "--pred", root / "post", "--gt", root / "cases", "--out", root / "report.csv"]),
    ]
    return {name: cli(*args) for name, args in steps}


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


@pytest.mark.slow
def test_end_to_end(report, tmp_path):
    t0 = time.perf_counter()
    codes = _pipeline(tmp_path / "run1")
    elapsed = time.perf_counter() - t0
    codes2 = _pipeline(tmp_path / "run2")
    deterministic = _tree_equal(tmp_path / "run1", tmp_path / "run2")
    ok = all(c == 0 for c in codes.values()) and all(c == 0 for c in codes2.values())
    report("end-to-end", ok and deterministic and elapsed < 300,
           f"exit codes={sorted(set(codes.values()) | set(codes2.values()))}, deterministic={deterministic}, "
           f"single run={elapsed:.0f}s (<300s)")


def test_nifti_round_trip(report, tmp_path):
    rng = np.random.default_rng(0)
    failures = []
    for dtype in (np.uint8, np.int16, np.int32, np.float32, np.float64):
        if np.issubdtype(dtype, np.integer):
            info = np.iinfo(dtype)
            data = rng.integers(info.min, info.max, (7, 6, 5), endpoint=True).astype(dtype)
        else:
            data = rng.normal(0, 1e4, (7, 6, 5)).astype(dtype)
        aff = np.array([[0.9, 0.1, 0, -10], [-0.1, 1.1, 0, 5], [0, 0, 2.5, 30], [0, 0, 0, 1.0]])
        for ext in (".nii", ".nii.gz"):
            p = write_nifti(VoxelGrid(data, aff), tmp_path / f"{np.dtype(dtype).name}{ext}")
            back = read_nifti(p)
            p2 = write_nifti(back, tmp_path / f"again{ext}")
            if back.data.tobytes() != data.tobytes() or back.data.dtype != data.dtype \
                    or p.read_bytes() != p2.read_bytes():
                failures.append(f"{np.dtype(dtype).name}{ext}")
    report("NIfTI round trip", not failures, f"5 dtypes x (plain, gzip); failures={failures}")
