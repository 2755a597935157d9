import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import blob_mask, random_labels
from adaptseg.metrics import (MEAN_ROW, LesionParams, evaluate_case, lesion_wise, reports_to_csv,
                              reports_to_json, surface_voxels, volumetric_dice, volumetric_hd95)

mask_pairs = st.integers(2, 6).flatmap(
    lambda n: st.tuples(arrays(bool, (n, n, n)), arrays(bool, (n, n, n))))


def _box(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


# --- volumetric dice ---------------------------------------------------------

def test_dice_identity_and_disjoint():
    a = _box((6, 6, 6), (0, 0, 0), (2, 2, 2))
    assert volumetric_dice(a, a) == 1.0
    assert volumetric_dice(a, _box((6, 6, 6), (4, 4, 4), (6, 6, 6))) == 0.0


def test_dice_half_overlap():
    a = np.zeros((1, 1, 6), bool)
    b = np.zeros((1, 1, 6), bool)
    a[0, 0, :4] = True
    b[0, 0, 2:6] = True
    assert volumetric_dice(a, b) == 0.5


def test_dice_both_empty():
    z = np.zeros((3, 3, 3), bool)
    assert volumetric_dice(z, z) == 1.0


def test_dims_mismatch():
    with pytest.raises(ValueError):
        volumetric_dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))
    with pytest.raises(ValueError):
        volumetric_hd95(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


@given(mask_pairs)
def test_dice_symmetric_and_equals_oracle(pair):
    a, b = pair
    assert volumetric_dice(a, b) == volumetric_dice(b, a) == oracles.dice(a, b)


# --- HD95 ---------------------------------------------------------------

def test_hd95_identity():
    a = _box((8, 8, 8), (2, 2, 2), (5, 6, 7))
    assert volumetric_hd95(a, a) == 0.0


def test_hd95_two_voxels_three_apart():
    a = np.zeros((1, 1, 8), bool)
    b = np.zeros((1, 1, 8), bool)
    a[0, 0, 1] = b[0, 0, 4] = True
    assert volumetric_hd95(a, b) == 3.0


def test_hd95_empty_conventions():
    z = np.zeros((3, 3, 3), bool)
    o = z.copy()
    o[1, 1, 1] = True
    assert volumetric_hd95(z, z) == 0.0
    assert volumetric_hd95(z, o) == 374.0
    assert volumetric_hd95(o, z, penalty=10.0) == 10.0


def test_hd95_uses_spacing():
    a = np.zeros((1, 1, 8), bool)
    b = np.zeros((1, 1, 8), bool)
    a[0, 0, 1] = b[0, 0, 4] = True
    assert volumetric_hd95(a, b, spacing=(1, 1, 2.5)) == 7.5


def test_surface_includes_volume_border():
    m = np.ones((3, 3, 3), bool)
    s = surface_voxels(m)
    assert s.sum() == 26 and not s[1, 1, 1]


@given(mask_pairs, st.tuples(*[st.sampled_from([0.5, 1.0, 1.5])] * 3))
def test_hd95_symmetric_and_equals_oracle(pair, spacing):
    a, b = pair
    h = volumetric_hd95(a, b, spacing)
    assert h == volumetric_hd95(b, a, spacing)
    assert abs(h - oracles.volumetric_hd95(a, b, spacing)) <= 1e-9


# --- lesion-wise ---------------------------------------------------------

def _two_lesions():
    gt = np.zeros((16, 16, 16), bool)
    gt[1:4, 1:4, 1:4] = True
    gt[10:13, 10:13, 10:13] = True
    return gt


def test_lesion_wise_perfect():
    gt = _two_lesions()
    r = lesion_wise(gt, gt)
    assert (r.dice, r.hd95) == (1.0, 0.0)
    assert r.n_matched == 2 and not r.false_positives


def test_lesion_wise_one_missed():
    gt = _two_lesions()
    pred = gt.copy()
    pred[10:13, 10:13, 10:13] = False
    r = lesion_wise(gt, pred)
    assert r.dice == 0.5 and r.hd95 == 187.0
    assert r.n_false_negative == 1


def test_lesion_wise_empty_pred():
    gt = np.zeros((6, 6, 6), bool)
    gt[2:4, 2:4, 2:4] = True
    r = lesion_wise(gt, np.zeros_like(gt))
    assert (r.dice, r.hd95) == (0.0, 374.0)


def test_lesion_wise_both_empty():
    z = np.zeros((4, 4, 4), bool)
    r = lesion_wise(z, z)
    assert (r.dice, r.hd95) == (1.0, 0.0)


def test_false_positive_entry():
    gt = _two_lesions()
    pred = gt.copy()
    pred[7, 0, 15] = True
    r = lesion_wise(gt, pred)
    assert len(r.false_positives) == 1
    assert r.dice == pytest.approx(2 / 3) and r.hd95 == pytest.approx(374 / 3)
    assert lesion_wise(gt, pred, params=LesionParams(min_fp_size=1)).dice == 1.0


def test_shared_prediction_component():
    gt = np.zeros((3, 3, 9), bool)
    gt[1, 1, 1] = gt[1, 1, 7] = True
    pred = np.zeros_like(gt)
    pred[1, 1, 1:8] = True  # one bar touching both lesions
    r = lesion_wise(gt, pred)
    assert r.n_matched == 2 and not r.false_positives
    assert all(m.matched == [1] for m in r.lesions)


def test_dilation_radius_controls_matching():
    gt = np.zeros((1, 1, 7), bool)
    pred = np.zeros_like(gt)
    gt[0, 0, 1] = True
    pred[0, 0, 3] = True  # two voxels away
    assert lesion_wise(gt, pred).n_matched == 0
    assert lesion_wise(gt, pred, params=LesionParams(dilation_radius=2)).n_matched == 1


def test_single_component_equals_volumetric():
    gt = np.zeros((10, 10, 10), bool)
    gt[2:7, 2:7, 2:7] = True
    pred = np.zeros_like(gt)
    pred[3:8, 2:7, 2:6] = True
    r = lesion_wise(gt, pred)
    assert r.dice == volumetric_dice(gt, pred)
    assert r.hd95 == pytest.approx(volumetric_hd95(gt, pred), abs=1e-12)


def test_lesion_wise_against_reference(rng):
    for trial in range(80):
        n = int(rng.integers(4, 11))
        gt = blob_mask(rng, (n, n, n), n_seeds=int(rng.integers(0, 4)))
        pred = blob_mask(rng, (n, n, n), n_seeds=int(rng.integers(0, 4)))
        if trial % 3 == 0:
            pred = gt ^ (rng.random(gt.shape) < 0.05)
        sp = tuple(rng.choice([0.8, 1.0, 1.3], 3))
        conn = (26, 18, 6)[trial % 3]
        r = lesion_wise(gt, pred, sp, LesionParams(connectivity=conn))
        d, h = oracles.lesion_wise(gt, pred, sp, connectivity=conn)
        assert r.dice == d
        assert abs(r.hd95 - h) <= 1e-9


@given(mask_pairs)
def test_lesion_dice_in_unit_interval(pair):
    r = lesion_wise(*pair)
    assert 0.0 <= r.dice <= 1.0 and r.hd95 >= 0


@given(mask_pairs, st.integers(0, 100))
def test_adding_false_positive_never_helps(pair, seed):
    gt, pred = pair
    n = gt.shape[0]
    big = np.zeros((n, n, n + 3), bool)
    big_gt, big_pred = big.copy(), big.copy()
    big_gt[:, :, :n], big_pred[:, :, :n] = gt, pred
    before = lesion_wise(big_gt, big_pred)
    big_pred[seed % n, (seed // n) % n, n + 2] = True  # isolated, two voxels from gt
    after = lesion_wise(big_gt, big_pred)
    assert after.dice <= before.dice
    assert after.hd95 >= before.hd95 - 1e-12


@given(mask_pairs, st.tuples(*[st.integers(1, 3)] * 3))
def test_translation_invariance(pair, shift):
    # volume borders count as surface, so keep a one-voxel margin around every placement
    gt, pred = pair
    n = gt.shape[0]

    def place(mask, offset):
        out = np.zeros((n + 4,) * 3, bool)
        out[tuple(slice(o, o + n) for o in offset)] = mask
        return out

    a = lesion_wise(place(gt, shift), place(pred, shift))
    b = lesion_wise(place(gt, (1, 1, 1)), place(pred, (1, 1, 1)))
    assert a.dice == b.dice and a.hd95 == pytest.approx(b.hd95, abs=1e-12)
    assert volumetric_hd95(place(gt, shift), place(pred, shift)) == pytest.approx(
        volumetric_hd95(place(gt, (1, 1, 1)), place(pred, (1, 1, 1))), abs=1e-12)


# --- case report -----------------------------------------------------------

def test_evaluate_identity(rng):
    lab = random_labels(rng, (8, 8, 8), 0.3)
    rep = evaluate_case(lab, lab, case_id="x")
    for r in ("ET", "TC", "WT"):
        rr = rep.regions[r]
        assert (rr.lesion_wise_dice, rr.lesion_wise_hd95, rr.volumetric_dice, rr.volumetric_hd95) == (1, 0, 1, 0)


def test_evaluate_empty_prediction():
    lab = np.zeros((6, 6, 6), np.uint8)
    lab[1:3, 1:3, 1:3] = 3
    lab[3:5, 3:5, 3:5] = 2
    lab[1, 4, 4] = 1
    rep = evaluate_case(lab, np.zeros_like(lab))
    assert set(rep.regions) == {"ET", "TC", "WT"}
    assert all(rep.regions[r].lesion_wise_dice == 0.0 for r in rep.regions)


def test_report_serialization(rng):
    params = LesionParams()
    lab = random_labels(rng, (6, 6, 6), 0.3)
    reps = [evaluate_case(lab, lab, case_id="b"), evaluate_case(lab, np.zeros_like(lab), case_id="a")]
    text = reports_to_csv(reps, params)
    lines = text.splitlines()
    assert lines[0].startswith("# params: ")
    assert json.loads(lines[0][len("# params: "):])["penalty"] == 374.0
    assert lines[2].startswith("a,ET") and lines[5].startswith("b,ET")
    assert sum(line.startswith(MEAN_ROW) for line in lines) == 3
    doc = json.loads(reports_to_json(reps, params))
    assert [c["case_id"] for c in doc["cases"]] == ["a", "b"]
    assert doc["params"]["dilation_radius"] == 1
