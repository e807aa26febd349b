from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfield.metrics import (
    MetricsReport,
    dice,
    dice_macro,
    evaluate_subject,
    intrusion_branches,
    intrusion_distance,
    nsd,
    oracle_dice,
    oracle_evaluate_subject,
    oracle_nsd,
    oracle_tree_scores,
)
from segfield.volume import LabelVolume


def lab(data, nc):
    return LabelVolume(np.asarray(data, dtype=np.uint8), nc)


def random_pair(seed, n=10, classes=3):
    rng = np.random.default_rng(seed)
    gt = lab(rng.integers(0, classes, size=(n, n, n)), classes)
    pred = lab(rng.integers(0, classes, size=(n, n, n)), classes)
    # sparse trees: thin random lines of each foreground class
    tree = np.zeros((n, n, n), dtype=np.uint8)
    for cls in range(1, classes):
        for _ in range(2):
            z, y = rng.integers(0, n, size=2)
            x0, x1 = sorted(rng.integers(0, n, size=2))
            tree[z, y, x0 : x1 + 1] = cls
    bronchi = lab(tree, classes)
    artery = lab(np.where(rng.random((n, n, n)) < 0.02, tree, 0), classes)
    subj = SimpleNamespace(segments=gt, bronchi=bronchi, artery=artery)
    return subj, pred


# ---------------------------------------------------------------- dice


def test_dice_identical_is_one():
    rng = np.random.default_rng(0)
    g = lab(rng.integers(0, 3, size=(6, 6, 6)), 3)
    assert dice(g, g, 1) == 1.0
    assert dice(g, g, 2) == 1.0


def test_dice_empty_conventions():
    g = lab(np.zeros((4, 4, 4)), 3)
    p = lab(np.zeros((4, 4, 4)), 3)
    assert dice(g, p, 1) == 1.0  # both empty
    p2 = np.zeros((4, 4, 4), dtype=np.uint8)
    p2[0, 0, 0] = 1
    assert dice(g, lab(p2, 3), 1) == 0.0  # one empty


def test_dice_hand_case():
    g = np.zeros((4, 4, 4), dtype=np.uint8)
    p = np.zeros((4, 4, 4), dtype=np.uint8)
    g[0, 0, :3] = 1  # 3 voxels
    p[0, 0, 1:4] = 1  # 3 voxels, overlap 2
    assert dice(lab(g, 2), lab(p, 2), 1) == pytest.approx(4.0 / 6.0)


def test_dice_macro_averages_foreground_only():
    g = np.zeros((4, 4, 4), dtype=np.uint8)
    g[0] = 1
    g[1] = 2
    gt = lab(g, 3)
    per, macro = dice_macro(gt, gt)
    assert set(per) == {1, 2}
    assert macro == 1.0


def test_dice_dims_mismatch_raises():
    with pytest.raises(ValueError):
        dice(lab(np.zeros((4, 4, 4)), 2), lab(np.zeros((5, 4, 4)), 2), 1)


# ---------------------------------------------------------------- nsd


def test_nsd_identical_is_one():
    rng = np.random.default_rng(1)
    g = lab(rng.integers(0, 2, size=(8, 8, 8)), 2)
    assert nsd(g, g, 1) == 1.0


def test_nsd_adjacent_single_voxels():
    # Surfaces one voxel apart: every surface voxel within tau=1 of the other.
    g = np.zeros((8, 8, 8), dtype=np.uint8)
    p = np.zeros((8, 8, 8), dtype=np.uint8)
    g[4, 4, 4] = 1
    p[4, 4, 5] = 1
    assert nsd(lab(g, 2), lab(p, 2), 1, tau=1.0) == 1.0


def test_nsd_far_apart_is_zero():
    g = np.zeros((8, 8, 8), dtype=np.uint8)
    p = np.zeros((8, 8, 8), dtype=np.uint8)
    g[1, 1, 1] = 1
    p[6, 6, 6] = 1
    assert nsd(lab(g, 2), lab(p, 2), 1, tau=1.0) == 0.0


def test_nsd_empty_conventions():
    z = lab(np.zeros((4, 4, 4)), 2)
    assert nsd(z, z, 1) == 1.0
    p = np.zeros((4, 4, 4), dtype=np.uint8)
    p[0, 0, 0] = 1
    assert nsd(z, lab(p, 2), 1) == 0.0


def test_nsd_partial_hand_case():
    # gt surface: single voxel at x=0; pred: single voxel 2 away.  tau=1
    # misses both directions; tau=2 catches both.
    g = np.zeros((6, 6, 6), dtype=np.uint8)
    p = np.zeros((6, 6, 6), dtype=np.uint8)
    g[3, 3, 0] = 1
    p[3, 3, 2] = 1
    assert nsd(lab(g, 2), lab(p, 2), 1, tau=1.0) == 0.0
    assert nsd(lab(g, 2), lab(p, 2), 1, tau=2.0) == 1.0


# ---------------------------------------------------------------- intrusions


def half_space_case():
    n = 16
    seg = np.zeros((n, n, n), dtype=np.uint8)
    seg[:, :, :8] = 1  # x <= 7
    tree = np.zeros((n, n, n), dtype=np.uint8)
    tree[8, 8, 0:10] = 1  # crosses the boundary by two voxels
    return lab(tree, 2), lab(seg, 2)


def test_intrusion_half_space_line():
    tree, seg = half_space_case()
    branches = intrusion_branches(tree, seg, 1)
    assert len(branches) == 1
    assert branches[0].voxels == {(8, 8, 8), (9, 8, 8)}
    assert branches[0].distance == 2.0


def test_intrusion_distance_recompute_matches():
    tree, seg = half_space_case()
    b = intrusion_branches(tree, seg, 1)[0]
    assert intrusion_distance(b, seg) == b.distance


def test_intrusion_none_when_contained():
    n = 8
    seg = np.zeros((n, n, n), dtype=np.uint8)
    seg[2:6, 2:6, 2:6] = 1
    tree = np.zeros((n, n, n), dtype=np.uint8)
    tree[3, 3, 3:5] = 1
    assert intrusion_branches(lab(tree, 2), lab(seg, 2), 1) == []


def test_intrusion_unmeasurable_without_predicted_surface():
    n = 8
    seg = np.zeros((n, n, n), dtype=np.uint8)  # class 1 never predicted
    tree = np.zeros((n, n, n), dtype=np.uint8)
    tree[4, 4, 2:5] = 1
    branches = intrusion_branches(lab(tree, 2), lab(seg, 2), 1)
    assert len(branches) == 1
    assert branches[0].distance is None
    assert intrusion_distance(branches[0], lab(seg, 2)) is None


def test_two_escape_pieces_counted_separately():
    n = 12
    seg = np.zeros((n, n, n), dtype=np.uint8)
    seg[:, :, 4:8] = 1
    tree = np.zeros((n, n, n), dtype=np.uint8)
    tree[6, 6, 2:10] = 1  # escapes on both sides of the slab
    branches = intrusion_branches(lab(tree, 2), lab(seg, 2), 1)
    assert len(branches) == 2
    assert {frozenset(b.voxels) for b in branches} == {
        frozenset({(2, 6, 6), (3, 6, 6)}),
        frozenset({(8, 6, 6), (9, 6, 6)}),
    }


# ---------------------------------------------------------------- reports


def test_evaluate_subject_perfect_prediction():
    seg = np.zeros((8, 8, 8), dtype=np.uint8)
    seg[:, :, :4] = 1
    seg[:, :, 4:] = 2
    tree = np.zeros((8, 8, 8), dtype=np.uint8)
    tree[4, 4, 1:3] = 1
    tree[4, 4, 5:7] = 2
    subj = SimpleNamespace(segments=lab(seg, 3), bronchi=lab(tree, 3), artery=lab(tree, 3))
    rep = evaluate_subject(subj, lab(seg, 3))
    assert rep.dice_macro == 1.0
    assert rep.nsd == 1.0
    assert rep.nib == 0 and rep.nia == 0
    assert rep.idb is None and rep.ida is None


def test_report_json_round_trip():
    rep = MetricsReport({1: 0.5, 2: 0.75}, 0.625, 0.9, 2, 1.5, 0, None, subject_id="s07")
    back = MetricsReport.from_json(rep.to_json())
    assert back == rep


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_fast_paths_match_oracles(seed):
    subj, pred = random_pair(seed, n=8)
    fast = evaluate_subject(subj, pred)
    slow = oracle_evaluate_subject(subj, pred)
    assert fast.per_class_dice == slow.per_class_dice
    assert fast.dice_macro == slow.dice_macro
    assert fast.nsd == slow.nsd
    assert (fast.nib, fast.idb, fast.nia, fast.ida) == (slow.nib, slow.idb, slow.nia, slow.ida)


def test_oracles_reject_large_volumes():
    big = lab(np.zeros((17, 4, 4)), 2)
    with pytest.raises(ValueError):
        oracle_dice(big, big, 1)
    with pytest.raises(ValueError):
        oracle_nsd(big, big, 1)
    with pytest.raises(ValueError):
        oracle_tree_scores(big, big)


def test_oracle_constructed_cases_agree():
    tree, seg = half_space_case()
    count, dist = oracle_tree_scores(tree, seg)
    assert (count, dist) == (1, 2.0)
    subj = SimpleNamespace(segments=seg, bronchi=tree, artery=lab(np.zeros((16, 16, 16)), 2))
    fast = evaluate_subject(subj, seg)
    slow = oracle_evaluate_subject(subj, seg)
    assert fast == slow
