import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vecmap.geometry import MapClass, MapElement, PerceptionRange, Scene
from vecmap.losses import LossWeights
from vecmap.matching import SceneTargets, assign, build_targets, cost_matrix, hungarian, matching_cost

W = LossWeights()


def brute_force(cost):
    """Minimum total over every injection of the smaller side into the larger."""
    c = np.asarray(cost)
    r, k = c.shape
    if r <= k:
        return min(sum(c[i, j] for i, j in enumerate(cols)) for cols in itertools.permutations(range(k), r))
    return min(sum(c[i, j] for j, i in enumerate(rows)) for rows in itertools.permutations(range(r), k))


def total(cost, pairs):
    return sum(cost[i][j] for i, j in pairs)


# ---------------------------------------------------------------- hungarian


def test_diagonal_and_antidiagonal_examples():
    assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]
    assert hungarian([[2, 1], [1, 2]]) == [(0, 1), (1, 0)]
    assert total([[1, 2], [2, 1]], hungarian([[1, 2], [2, 1]])) == 2


def test_random_six_by_four_equals_enumeration():
    for seed in range(100):
        c = np.random.default_rng(seed).uniform(0, 10, size=(6, 4))
        pairs = hungarian(c)
        assert len(pairs) == 4 and len({i for i, _ in pairs}) == 4 and len({j for _, j in pairs}) == 4
        assert total(c, pairs) == pytest.approx(brute_force(c), abs=1e-9)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_never_worse_than_any_injection(r, k, seed):
    c = np.random.default_rng(seed).normal(size=(r, k)) * 5
    pairs = hungarian(c)
    assert len(pairs) == min(r, k)
    assert total(c, pairs) <= brute_force(c) + 1e-9


@given(arrays(np.float64, (5, 5), elements=st.integers(0, 20).map(float)), st.floats(0.01, 100))
def test_scaling_keeps_optimal_total(c, lam):
    # with ties the pairs may differ, so compare optimal totals under both scalings
    a, b = hungarian(c), hungarian(c * lam)
    assert total(c, b) == pytest.approx(total(c, a), abs=1e-9)


def test_scaling_keeps_pairs_without_ties():
    c = np.random.default_rng(0).uniform(size=(7, 5))
    assert hungarian(c) == hungarian(c * 3.7) == hungarian(c * 0.02)


def test_edge_cases():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian([[5.0]]) == [(0, 0)]
    with pytest.raises(ValueError):
        hungarian([[1.0, np.inf]])


# ---------------------------------------------------------------- costs

PR = PerceptionRange()


def _targets(p=5):
    sc = Scene("s", [
        MapElement(MapClass.LANE_DIVIDER, [[-10, -20], [0, 0], [5, 25]]),
        MapElement(MapClass.PEDESTRIAN_CROSSING, [[-5, -5], [5, -5], [5, 5], [-5, 5]], closed=True),
    ])
    return build_targets(sc, p, 8, 4, PR)


def _perfect_prediction(tg, j, ordering=None):
    logits = np.full(3, -40.0)
    logits[tg.classes[j]] = 40.0
    pts = tg.points[j] if ordering is None else tg.points[j][ordering]
    mask = np.where(tg.masks[j] > 0, 40.0, -40.0)
    return logits, pts, mask


@pytest.mark.parametrize("j", [0, 1])
def test_perfect_prediction_costs_nothing(j):
    tg = _targets()
    logits, pts, mask = _perfect_prediction(tg, j, ordering=np.arange(5)[::-1])
    cost, parts, order = matching_cost(logits, pts, mask, tg, j, W)
    assert cost <= 1e-6
    np.testing.assert_array_equal(tg.points[j][order], pts)


def _scalar_cost(logits, pts, mask, gt_cls, gt_pts, gt_mask, closed, w):
    p = 1.0 / (1.0 + math.exp(-logits[gt_cls]))
    c_cls = 0.25 * (1 - p) ** 2 * -math.log(p)
    n = len(gt_pts)
    if closed:
        orders = [[(s + d * k) % n for k in range(n)] for s in range(n) for d in (1, -1)]
    else:
        orders = [list(range(n)), list(range(n))[::-1]]
    best, best_o = None, None
    for o in orders:
        l1 = sum(abs(pts[k][0] - gt_pts[o[k]][0]) + abs(pts[k][1] - gt_pts[o[k]][1]) for k in range(n)) / n
        if best is None or l1 < best:
            best, best_o = l1, o
    g = [gt_pts[i] for i in best_o]
    dirs = []
    for k in range(n - 1):
        a = (pts[k + 1][0] - pts[k][0], pts[k + 1][1] - pts[k][1])
        b = (g[k + 1][0] - g[k][0], g[k + 1][1] - g[k][1])
        na, nb = math.hypot(*a), math.hypot(*b)
        dirs.append(1 - (a[0] * b[0] + a[1] * b[1]) / (na * nb))
    c_dir = sum(dirs) / len(dirs)
    bce = sum(math.log1p(math.exp(-abs(x))) + max(x, 0) - x * t for x, t in zip(mask, gt_mask)) / len(mask)
    s = [1 / (1 + math.exp(-x)) for x in mask]
    dice = 1 - (2 * sum(a * t for a, t in zip(s, gt_mask)) + 1) / (sum(s) + sum(gt_mask) + 1)
    return w.cls * c_cls + w.point * best + w.direction * c_dir + w.mask * (bce + dice)


@pytest.mark.parametrize("j", [0, 1])
def test_single_pair_against_scalar_oracle(j):
    tg = _targets()
    rng = np.random.default_rng(j)
    logits, pts, mask = rng.normal(size=3), rng.uniform(size=(5, 2)), rng.normal(size=32) * 2
    cost, _, _ = matching_cost(logits, pts, mask, tg, j, W)
    ref = _scalar_cost(logits.tolist(), pts.tolist(), mask.tolist(), int(tg.classes[j]), tg.points[j].tolist(),
                       tg.masks[j].tolist(), bool(tg.closed[j]), W)
    assert cost == pytest.approx(ref, abs=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_cost_invariant_under_equivalent_gt_orderings(seed, shift):
    tg = _targets()
    rng = np.random.default_rng(seed)
    cl, pts, ml = rng.normal(size=(4, 3)), rng.uniform(size=(4, 5, 2)), rng.normal(size=(4, 32))
    base = cost_matrix(cl, pts, ml, tg, W).total
    moved = SceneTargets(tg.classes, tg.points.copy(), tg.closed, tg.masks, tg.union)
    moved.points[0] = moved.points[0][::-1]
    moved.points[1] = np.roll(moved.points[1][::-1], shift, axis=0)
    np.testing.assert_allclose(cost_matrix(cl, pts, ml, moved, W).total, base, atol=1e-12)


def test_assignment_reuses_matching_ordering():
    tg = _targets()
    rng = np.random.default_rng(4)
    cl, pts, ml = rng.normal(size=(3, 3)), rng.uniform(size=(3, 5, 2)), rng.normal(size=(3, 32))
    l0, p0, m0 = _perfect_prediction(tg, 1, ordering=np.roll(np.arange(5), 2))
    cl[2], pts[2], ml[2] = l0, p0, m0
    asg = assign(cost_matrix(cl, pts, ml, tg, W))
    assert (2, 1) in asg.pairs and len(asg.pairs) == 2 and len(asg.unmatched) == 1
    k = asg.pairs.index((2, 1))
    np.testing.assert_array_equal(tg.points[1][asg.orderings[k]], p0)


def test_point_count_mismatch_raises():
    tg = _targets(p=5)
    with pytest.raises(ValueError, match="points"):
        cost_matrix(np.zeros((1, 3)), np.zeros((1, 4, 2)), np.zeros((1, 32)), tg, W)


def test_build_targets_shapes_and_union():
    tg = _targets()
    assert tg.points.shape == (2, 5, 2) and tg.masks.shape == (2, 32)
    assert ((tg.points >= 0) & (tg.points <= 1)).all()
    np.testing.assert_array_equal(tg.union, (tg.masks.sum(0) > 0).astype(float))
    empty = build_targets(Scene("e", []), 5, 8, 4, PR)
    assert empty.num_gt == 0 and empty.union.shape == (32,)
