import math

import numpy as np
import pytest

from anchorforge import (
    AnchorSet,
    Assignment,
    LogShape,
    WarmupSchedule,
    cluster_weight_at,
    hard_assign_threshold,
    hard_assign_yolo,
    iou_aligned,
    decode_log,
    shape_dist,
    soft_assign,
    temperature_at,
    utilization_counts,
)
from oracles import softmax_rows


def random_log_shapes(rng, n):
    return [LogShape(float(a), float(b)) for a, b in rng.normal(3.0, 1.0, size=(n, 2))]


class TestAssignment:
    def test_canonical_order(self):
        """Entries come back sorted by (gt, anchor) no matter the input order."""
        a = Assignment([2, 0, 1, 0], [1, 3, 0, 1], [0.5, 1.0, 0.25, 0.75])
        assert a.entries() == [(0, 1, 0.75), (0, 3, 1.0), (1, 0, 0.25), (2, 1, 0.5)]

    def test_same_entries_any_order(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            m = int(rng.integers(1, 30))
            j = rng.integers(0, 10, size=m)
            k = rng.integers(0, 5, size=m)
            w = rng.uniform(0.0, 1.0, size=m)
            perm = rng.permutation(m)
            a = Assignment(j, k, w)
            b = Assignment(j[perm], k[perm], w[perm])
            np.testing.assert_array_equal(a.gt_idx, b.gt_idx)
            np.testing.assert_array_equal(a.anchor_idx, b.anchor_idx)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_arrays_are_read_only(self):
        a = Assignment([0], [0], [1.0])
        with pytest.raises(ValueError):
            a.weights[0] = 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            Assignment([0, 1], [0], [1.0, 1.0])
        with pytest.raises(ValueError):
            Assignment([0], [0], [1.5])
        with pytest.raises(ValueError):
            Assignment([0], [0], [-0.1])
        with pytest.raises(ValueError):
            Assignment([-1], [0], [1.0])

    def test_empty_ok(self):
        assert len(Assignment([], [], [])) == 0


class TestHardYolo:
    def test_each_gt_once_with_weight_one(self):
        rng = np.random.default_rng(22)
        anchors = AnchorSet.from_array(rng.normal(3.0, 1.0, size=(4, 2)))
        for _ in range(20):
            gts = random_log_shapes(rng, int(rng.integers(1, 40)))
            a = hard_assign_yolo(gts, anchors)
            assert len(a) == len(gts)
            np.testing.assert_array_equal(a.gt_idx, np.arange(len(gts)))
            assert np.all(a.weights == 1.0)

    def test_picks_nearest(self):
        rng = np.random.default_rng(23)
        anchors = AnchorSet.from_array(rng.normal(3.0, 1.0, size=(5, 2)))
        for metric in ("one_minus_iou", "sq_l2_log"):
            gts = random_log_shapes(rng, 25)
            a = hard_assign_yolo(gts, anchors, metric)
            for j, k, _ in a.entries():
                dists = [shape_dist(gts[j], s, metric) for s in anchors.shapes]
                assert dists[k] == min(dists)

    def test_tie_goes_to_lowest_index(self):
        # two identical anchors: index 0 must win every time
        anchors = AnchorSet((LogShape(1.0, 1.0), LogShape(1.0, 1.0)))
        a = hard_assign_yolo([LogShape(0.0, 0.0), LogShape(2.0, 2.0)], anchors)
        assert list(a.anchor_idx) == [0, 0]

    def test_empty_gts(self):
        anchors = AnchorSet((LogShape(0.0, 0.0),))
        assert len(hard_assign_yolo([], anchors)) == 0


class TestHardThreshold:
    def test_includes_all_above_tau_and_best(self):
        rng = np.random.default_rng(24)
        anchors = AnchorSet.from_array(rng.normal(3.0, 0.7, size=(5, 2)))
        shapes = [decode_log(s) for s in anchors.shapes]
        for _ in range(20):
            gts = random_log_shapes(rng, 30)
            tau = float(rng.uniform(0.3, 0.7))
            a = hard_assign_threshold(gts, anchors, tau)
            got = {(j, k) for j, k, _ in a.entries()}
            for j, g in enumerate(gts):
                ious = [iou_aligned(decode_log(g), s) for s in shapes]
                want = {k for k, v in enumerate(ious) if v >= tau}
                want.add(int(np.argmax(ious)))
                assert {k for jj, k in got if jj == j} == want
            assert np.all(a.weights == 1.0)

    def test_no_gt_unassigned(self):
        """Even a gt below tau for every anchor gets its best anchor."""
        anchors = AnchorSet((LogShape(0.0, 0.0),))
        a = hard_assign_threshold([LogShape(5.0, 5.0)], anchors, 0.9)
        assert a.entries() == [(0, 0, 1.0)]

    def test_tau_validation(self):
        anchors = AnchorSet((LogShape(0.0, 0.0),))
        for tau in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                hard_assign_threshold([LogShape(0.0, 0.0)], anchors, tau)


class TestSoftAssign:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(25)
        anchors = AnchorSet.from_array(rng.normal(3.0, 1.0, size=(6, 2)))
        for _ in range(20):
            gts = random_log_shapes(rng, int(rng.integers(1, 30)))
            temp = float(rng.uniform(0.05, 5.0))
            a = soft_assign(gts, anchors, "sq_l2_log", temp)
            assert len(a) == len(gts) * len(anchors)
            sums = np.zeros(len(gts))
            np.add.at(sums, a.gt_idx, a.weights)
            np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)

    def test_known_two_anchor_weights(self):
        """Distances (0, ln 3) at temperature 1 give weights (3/4, 1/4)."""
        anchors = AnchorSet((LogShape(0.0, 0.0), LogShape(math.sqrt(math.log(3.0)), 0.0)))
        a = soft_assign([LogShape(0.0, 0.0)], anchors, "sq_l2_log", 1.0)
        w = {(j, k): wt for j, k, wt in a.entries()}
        assert math.isclose(w[(0, 0)], 0.75, rel_tol=1e-12)
        assert math.isclose(w[(0, 1)], 0.25, rel_tol=1e-12)

    def test_matches_reference_softmax(self):
        rng = np.random.default_rng(26)
        anchors = AnchorSet.from_array(rng.normal(3.0, 1.0, size=(4, 2)))
        from anchorforge import shape_dist_matrix

        for _ in range(20):
            g = rng.normal(3.0, 1.0, size=(8, 2))
            temp = float(rng.uniform(0.05, 3.0))
            want = softmax_rows(-shape_dist_matrix(g, anchors.as_array(), "sq_l2_log") / temp)
            a = soft_assign(g, anchors, "sq_l2_log", temp)
            got = np.zeros((8, 4))
            got[a.gt_idx, a.anchor_idx] = a.weights
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_temperature_must_be_positive(self):
        anchors = AnchorSet((LogShape(0.0, 0.0),))
        with pytest.raises(ValueError):
            soft_assign([LogShape(0.0, 0.0)], anchors, "sq_l2_log", 0.0)

    def test_extreme_distances_stay_finite(self):
        anchors = AnchorSet((LogShape(-50.0, -50.0), LogShape(50.0, 50.0)))
        a = soft_assign([LogShape(50.0, 50.0)], anchors, "sq_l2_log", 0.01)
        assert np.all(np.isfinite(a.weights))
        assert math.isclose(float(a.weights.sum()), 1.0, abs_tol=1e-12)


class TestWarmupSchedules:
    def test_temperature_endpoints(self):
        sched = WarmupSchedule(warmup_iters=1500, temp_start=2.0, temp_floor=1e-2)
        assert temperature_at(0, sched) == 2.0
        assert temperature_at(750, sched) == 1.0
        assert temperature_at(1500, sched) is None
        assert temperature_at(10_000, sched) is None

    def test_temperature_floor(self):
        sched = WarmupSchedule(warmup_iters=1000, temp_start=2.0, temp_floor=0.5)
        assert temperature_at(999, sched) == 0.5

    def test_temperature_monotone_nonincreasing(self):
        sched = WarmupSchedule(warmup_iters=200)
        values = [temperature_at(t, sched) for t in range(200)]
        assert all(v is not None for v in values)
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_zero_warmup_disables_both(self):
        sched = WarmupSchedule(warmup_iters=0)
        assert temperature_at(0, sched) is None
        assert cluster_weight_at(0, sched) == 0.0

    def test_cluster_weight_decay(self):
        sched = WarmupSchedule(warmup_iters=1500, lambda_start=1.0)
        assert cluster_weight_at(0, sched) == 1.0
        assert math.isclose(cluster_weight_at(750, sched), 0.5)
        assert cluster_weight_at(1500, sched) == 0.0
        assert cluster_weight_at(99_999, sched) == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            WarmupSchedule(warmup_iters=-1)
        with pytest.raises(ValueError):
            WarmupSchedule(temp_start=0.0)
        with pytest.raises(ValueError):
            WarmupSchedule(temp_floor=-1.0)
        with pytest.raises(ValueError):
            WarmupSchedule(lambda_start=1.5)
        with pytest.raises(ValueError):
            temperature_at(-1, WarmupSchedule())


class TestUtilization:
    def test_hard_counts_every_entry(self):
        a = Assignment([0, 1, 1, 2], [0, 0, 2, 2], [1.0, 1.0, 1.0, 1.0])
        np.testing.assert_array_equal(utilization_counts(a, 4), [2, 0, 2, 0])

    def test_yolo_counts_sum_to_n(self):
        rng = np.random.default_rng(27)
        anchors = AnchorSet.from_array(rng.normal(3.0, 1.0, size=(3, 2)))
        gts = random_log_shapes(rng, 50)
        a = hard_assign_yolo(gts, anchors)
        assert utilization_counts(a, 3).sum() == 50

    def test_soft_counts_argmax_per_gt(self):
        a = Assignment([0, 0, 1, 1], [0, 1, 0, 1], [0.3, 0.7, 0.6, 0.4])
        np.testing.assert_array_equal(utilization_counts(a, 2, soft=True), [1, 1])

    def test_soft_tie_to_lowest_anchor(self):
        a = Assignment([0, 0], [0, 1], [0.5, 0.5])
        np.testing.assert_array_equal(utilization_counts(a, 2, soft=True), [1, 0])
