import math

import numpy as np
import pytest

from ragseg.metrics import (CaseResult, aggregate, boundary_pixels,
                            case_analysis, dice_score, hausdorff,
                            make_case_result)


# --- independent oracles ------------------------------------------------------

def dice_oracle(pred, gt, class_id):
    """Set-counting brute force."""
    p = {(y, x) for y, x in zip(*np.nonzero(pred == class_id))}
    g = {(y, x) for y, x in zip(*np.nonzero(gt == class_id))}
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def boundary_oracle(region):
    """Definition-level boundary scan: a region pixel missing any 4-neighbour."""
    h, w = region.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not region[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= ny < h and 0 <= nx < w) or not region[ny, nx]
                   for ny, nx in nbrs):
                out.append((y, x))
    return out


def hausdorff_oracle(pred, gt, class_id):
    """Brute force per the definition, exact integer squared distances."""
    p = np.asarray(pred) == class_id
    g = np.asarray(gt) == class_id
    if not p.any() and not g.any():
        return 0.0
    if p.any() != g.any():
        h, w = np.asarray(pred).shape
        return float(np.sqrt(h * h + w * w))
    pb = boundary_oracle(p)
    gb = boundary_oracle(g)

    def directed(src, dst):
        dst_arr = np.array(dst, dtype=np.int64)
        worst = 0
        for (y, x) in src:
            d = (dst_arr[:, 0] - y) ** 2 + (dst_arr[:, 1] - x) ** 2
            worst = max(worst, int(d.min()))
        return worst

    return float(np.sqrt(max(directed(pb, gb), directed(gb, pb))))


# --- dice ----------------------------------------------------------------------

def test_dice_identity():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 2:5] = 1
    assert dice_score(m, m, 1) == 1.0


def test_dice_both_empty():
    m = np.zeros((8, 8), dtype=np.uint8)
    assert dice_score(m, m, 3) == 1.0


def test_dice_one_empty():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = a.copy()
    b[0, 0] = 1
    assert dice_score(a, b, 1) == 0.0
    assert dice_score(b, a, 1) == 0.0


def test_dice_half_overlap():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0:4] = 1          # |P| = 4
    b[0, 2:4] = 1          # overlap 2
    b[1, 0:2] = 1          # |G| = 4
    assert dice_score(a, b, 1) == 0.5


def test_dice_symmetry_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        b = rng.integers(0, 3, size=(10, 10)).astype(np.uint8)
        for c in (0, 1, 2):
            assert dice_score(a, b, c) == dice_score(b, a, c)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_score(np.zeros((4, 4)), np.zeros((5, 5)), 1)


def test_dice_matches_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(300):
        a = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        b = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        assert abs(dice_score(a, b, 1) - dice_oracle(a, b, 1)) <= 1e-9


# --- hausdorff -------------------------------------------------------------------

def test_hd_identity():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 3:6] = 1
    assert hausdorff(m, m, 1) == 0.0


def test_hd_single_pixels():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(a, b, 1) == 5.0


def test_hd_one_empty_penalty():
    a = np.zeros((64, 64), dtype=np.uint8)
    b = a.copy()
    b[10:20, 10:20] = 1
    expected = math.sqrt(64 ** 2 + 64 ** 2)
    assert hausdorff(a, b, 1) == pytest.approx(expected, abs=1e-9)
    assert hausdorff(a, b, 1) == pytest.approx(90.51, abs=0.01)


def test_hd_both_empty():
    m = np.zeros((8, 8), dtype=np.uint8)
    assert hausdorff(m, m, 2) == 0.0


def test_hd_symmetry_and_zero_random():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.integers(0, 2, size=(12, 12)).astype(np.uint8)
        b = rng.integers(0, 2, size=(12, 12)).astype(np.uint8)
        assert hausdorff(a, a, 1) == 0.0 or not (a == 1).any()
        assert hausdorff(a, b, 1) == hausdorff(b, a, 1)


def test_hd_triangle_inequality_brute():
    rng = np.random.default_rng(5)
    for _ in range(40):
        masks = []
        while len(masks) < 3:
            m = (rng.random((16, 16)) < 0.3).astype(np.uint8)
            if m.any():
                masks.append(m)
        a, b, c = masks
        hab = hausdorff(a, b, 1)
        hbc = hausdorff(b, c, 1)
        hac = hausdorff(a, c, 1)
        assert hac <= hab + hbc + 1e-9


def test_hd_matches_oracle_random():
    rng = np.random.default_rng(6)
    for _ in range(200):
        a = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        b = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        ours = hausdorff(a, b, 1)
        ref = hausdorff_oracle(a, b, 1)
        assert ours == ref, f"{ours} != {ref}"  # bitwise


def test_boundary_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        region = rng.random((10, 10)) < 0.4
        ours = {tuple(p) for p in boundary_pixels(region)}
        ref = set(boundary_oracle(region))
        assert ours == ref


def test_hd_shape_mismatch():
    with pytest.raises(ValueError):
        hausdorff(np.zeros((4, 4)), np.zeros((5, 5)), 1)


# --- aggregation ------------------------------------------------------------------

def _case(pid, phase, dice, hd):
    return make_case_result(pid, phase, {1: dice, 2: dice, 3: dice},
                            {1: hd, 2: hd, 3: hd})


def test_aggregate_single_case():
    agg = aggregate([_case("a", "ED", 0.7, 2.0)])
    assert agg["dice_mean"] == pytest.approx(0.7)
    assert agg["dice_std"] == 0.0
    assert agg["num_cases"] == 1


def test_aggregate_two_cases_population_std():
    agg = aggregate([_case("a", "ED", 0.8, 1.0), _case("b", "ED", 0.9, 3.0)])
    assert agg["dice_mean"] == pytest.approx(0.85, abs=1e-12)
    assert agg["dice_std"] == pytest.approx(0.05, abs=1e-12)
    assert agg["hd_mean"] == pytest.approx(2.0)


def test_aggregate_missing_hd_excluded():
    a = make_case_result("a", "ED", {1: 0.9, 2: 0.8}, {1: 2.0, 2: None})
    b = make_case_result("b", "ED", {1: 0.7, 2: 0.6}, {1: 4.0, 2: 6.0})
    agg = aggregate([a, b])
    assert agg["hd_missing_count"] == 1
    assert agg["per_class_hd_mean"][2] == pytest.approx(6.0)
    assert agg["per_class_hd_mean"][1] == pytest.approx(3.0)


def test_aggregate_idempotent():
    cases = [_case("a", "ED", 0.8, 1.0), _case("b", "ES", 0.9, 3.0)]
    agg1 = aggregate(cases)
    agg2 = aggregate(cases)
    assert agg1 == agg2


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


# --- case analysis -----------------------------------------------------------------

def test_case_analysis_identical():
    cases = [_case("a", "ED", 0.8, 1.0), _case("b", "ED", 0.9, 2.0)]
    rep = case_analysis(cases, cases)
    assert (rep["improved"], rep["degraded"], rep["unchanged"]) == (0, 0, 2)


def test_case_analysis_fixture():
    base = [_case("a", "ED", 0.8, 1.0), _case("b", "ED", 0.8, 1.0),
            _case("c", "ED", 0.8, 1.0)]
    ours = [_case("a", "ED", 0.9, 1.0), _case("b", "ED", 0.75, 1.0),
            _case("c", "ED", 0.8, 1.0)]
    rep = case_analysis(ours, base)
    assert (rep["improved"], rep["degraded"], rep["unchanged"]) == (1, 1, 1)
    assert rep["top_improved"][0][0] == "a/ED"
    assert rep["top_improved"][0][1] == pytest.approx(0.1, abs=1e-12)
    assert rep["top_degraded"][0][0] == "b/ED"


def test_case_analysis_delta_format():
    base = [_case("a", "ED", 0.8, 1.0)]
    ours = [_case("a", "ED", 0.9462, 1.0)]
    rep = case_analysis(ours, base)
    cid, delta = rep["deltas"][0]
    # report deltas in the +0.xxxx / -0.xxxx style
    assert f"{delta:+.4f}" == "+0.1462"


def test_case_analysis_mismatched_sets():
    with pytest.raises(ValueError):
        case_analysis([_case("a", "ED", 0.8, 1.0)], [_case("b", "ED", 0.8, 1.0)])


def test_case_analysis_deterministic_order():
    base = [_case(p, "ED", 0.8, 1.0) for p in "abcd"]
    ours = [_case("a", "ED", 0.9, 1.0), _case("b", "ED", 0.9, 1.0),
            _case("c", "ED", 0.7, 1.0), _case("d", "ED", 0.95, 1.0)]
    rep = case_analysis(ours, base)
    assert [cid for cid, _ in rep["deltas"]] == ["d/ED", "a/ED", "b/ED", "c/ED"]
