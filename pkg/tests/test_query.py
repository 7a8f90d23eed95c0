import numpy as np
import pytest

from sparselgs.query import (
    LERF_MODE,
    OVS_MODE,
    QuerySpec,
    RelevancyMap,
    bbox_of,
    localize,
    mask_iou,
    metrics,
    relevancy,
    segment,
    smooth,
)
from sparselgs.scene import Granularity


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_spec(q, canon, mode=LERF_MODE, **kw):
    return QuerySpec(unit(q), np.stack([unit(c) for c in canon]), mode=mode, **kw)


class TestRelevancy:
    def test_aligned_query_orthogonal_canon(self):
        # phi_sem = phi_quer, canon orthogonal: e/(1+e)
        D = 8
        q = np.eye(D)[0]
        canon = [np.eye(D)[1], np.eye(D)[2]]
        sem = np.tile(q, (4, 5, 1))
        rmap = relevancy(sem, make_spec(q, canon))
        np.testing.assert_allclose(rmap.values, np.e / (1 + np.e), atol=1e-12)
        assert rmap.values[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_equal_dots_give_half(self):
        D = 4
        sem = np.tile(unit(np.ones(D)), (3, 3, 1))
        # query and canons all share the same dot with phi_sem
        q = np.eye(D)[0]
        canon = [np.eye(D)[1], np.eye(D)[2]]
        rmap = relevancy(sem, make_spec(q, canon))
        np.testing.assert_allclose(rmap.values, 0.5, atol=1e-12)

    def test_canon_equal_to_query_pins_half(self):
        D = 8
        q = np.eye(D)[0]
        canon = [q, np.eye(D)[3] * -1]  # one canon IS the query
        sem = np.tile(q, (2, 2, 1))
        rmap = relevancy(sem, make_spec(q, canon))
        np.testing.assert_allclose(rmap.values, 0.5, atol=1e-12)

    def test_strictly_inside_unit_interval_and_monotone(self):
        D = 6
        rng = np.random.default_rng(0)
        canon = [unit(rng.normal(size=D)) for _ in range(3)]
        sems = np.stack([unit(rng.normal(size=D)) for _ in range(64)]).reshape(8, 8, D)
        q = unit(rng.normal(size=D))
        vals = relevancy(sems, make_spec(q, canon)).values
        assert np.all(vals > 0) and np.all(vals < 1)

    def test_empty_canonical_rejected(self):
        with pytest.raises(ValueError, match="canonical"):
            QuerySpec(unit(np.ones(4)), np.zeros((0, 4)))


class TestSmooth:
    def test_constant_map_unchanged(self):
        m = RelevancyMap(np.full((9, 9), 0.37), Granularity.whole)
        out = smooth(m, 5)
        np.testing.assert_allclose(out.values, 0.37, atol=1e-12)

    def test_interior_impulse_spreads(self):
        vals = np.zeros((9, 9))
        vals[4, 4] = 1.0
        out = smooth(RelevancyMap(vals, Granularity.whole), 3)
        np.testing.assert_allclose(out.values[3:6, 3:6], 1.0 / 9.0, atol=1e-12)
        assert out.values[0, 0] == 0.0

    def test_kernel_one_is_identity(self):
        rng = np.random.default_rng(1)
        vals = rng.uniform(size=(7, 11))
        out = smooth(RelevancyMap(vals, Granularity.part), 1)
        np.testing.assert_array_equal(out.values, vals)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            smooth(RelevancyMap(np.zeros((4, 4)), Granularity.whole), 4)

    def test_mean_preserved_on_interior_dominated_map(self):
        rng = np.random.default_rng(2)
        vals = np.full((41, 41), 0.5)
        vals[15:26, 15:26] = rng.uniform(0.4, 0.6, (11, 11))
        out = smooth(RelevancyMap(vals, Granularity.whole), 3)
        assert out.values.mean() == pytest.approx(vals.mean(), abs=1e-9)

    def test_matches_bruteforce_box_filter(self):
        rng = np.random.default_rng(3)
        vals = rng.uniform(size=(12, 10))
        out = smooth(RelevancyMap(vals, Granularity.whole), 3).values
        padded = np.pad(vals, 1, mode="edge")
        for y in range(12):
            for x in range(10):
                expect = padded[y : y + 3, x : x + 3].mean()
                assert out[y, x] == pytest.approx(expect, abs=1e-12)


class TestLocalize:
    def test_unique_max(self):
        vals = np.zeros((8, 10))
        vals[5, 7] = 0.9
        gran, point, score = localize([RelevancyMap(vals, Granularity.whole)])
        assert point == (5, 7)
        assert score == pytest.approx(0.9)

    def test_picks_highest_granularity_map(self):
        a = np.full((6, 6), 0.2)
        a[1, 1] = 0.8
        b = np.full((6, 6), 0.2)
        b[4, 4] = 0.9
        gran, point, _ = localize(
            [RelevancyMap(a, Granularity.whole), RelevancyMap(b, Granularity.subpart)]
        )
        assert gran == Granularity.subpart
        assert point == (4, 4)

    def test_all_equal_ties_to_first(self):
        maps = [RelevancyMap(np.full((4, 4), 0.5), g) for g in Granularity]
        gran, point, _ = localize(maps)
        assert gran == Granularity.whole
        assert point == (0, 0)


class TestSegment:
    def test_lerf_step_function(self):
        vals = np.zeros((10, 10))
        vals[2:5, 3:8] = 1.0
        spec = make_spec(np.eye(4)[0], [np.eye(4)[1]], mode=LERF_MODE)
        mask = segment([RelevancyMap(vals, Granularity.whole)], spec)
        np.testing.assert_array_equal(mask, vals > 0.6)

    def test_lerf_uses_best_granularity_only(self):
        lo = np.full((6, 6), 0.65)
        hi = np.zeros((6, 6))
        hi[0, 0] = 0.9
        spec = make_spec(np.eye(4)[0], [np.eye(4)[1]], mode=LERF_MODE)
        mask = segment(
            [RelevancyMap(lo, Granularity.whole), RelevancyMap(hi, Granularity.part)], spec
        )
        # part map has the higher peak, so only its pixel survives
        assert mask.sum() == 1 and mask[0, 0]

    def test_ovs_area_floor_excludes_higher_score(self):
        big = np.zeros((80, 80))
        big[:40, :] = 0.85  # 3200 px at 0.85
        small = np.zeros((80, 80))
        small[:15, :80] = 0.95  # 1200 px at 0.95
        spec = make_spec(np.eye(4)[0], [np.eye(4)[1]], mode=OVS_MODE, area_threshold=2000)
        mask = segment(
            [RelevancyMap(big, Granularity.whole), RelevancyMap(small, Granularity.subpart)],
            spec,
        )
        np.testing.assert_array_equal(mask, big > 0.8)

    def test_ovs_falls_back_to_largest_below_floor(self):
        a = np.zeros((20, 20))
        a[:5, :5] = 0.9  # 25 px
        b = np.zeros((20, 20))
        b[:8, :8] = 0.85  # 64 px
        spec = make_spec(np.eye(4)[0], [np.eye(4)[1]], mode=OVS_MODE, area_threshold=2000)
        mask = segment(
            [RelevancyMap(a, Granularity.whole), RelevancyMap(b, Granularity.subpart)], spec
        )
        assert mask.sum() == 64

    def test_all_below_threshold_gives_empty_mask(self):
        vals = np.full((8, 8), 0.3)
        spec = make_spec(np.eye(4)[0], [np.eye(4)[1]], mode=LERF_MODE)
        mask = segment([RelevancyMap(vals, Granularity.whole)], spec)
        assert mask.sum() == 0


class TestMetrics:
    def test_identical_masks(self):
        m = np.zeros((6, 6), dtype=bool)
        m[2:4, 2:4] = True
        miou, _ = metrics([m], [m.copy()])
        assert miou == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((6, 6), dtype=bool)
        a[0, 0] = True
        b = np.zeros((6, 6), dtype=bool)
        b[5, 5] = True
        miou, _ = metrics([a], [b])
        assert miou == 0.0

    def test_half_overlap(self):
        gt = np.ones((8, 8), dtype=bool)
        pred = np.zeros((8, 8), dtype=bool)
        pred[:, :4] = True
        miou, _ = metrics([pred], [gt])
        assert miou == 0.5

    def test_iou_symmetric(self):
        rng = np.random.default_rng(4)
        a = rng.random((10, 10)) < 0.4
        b = rng.random((10, 10)) < 0.4
        assert mask_iou(a, b) == mask_iou(b, a)

    def test_localization_accuracy(self):
        gt = np.zeros((10, 10), dtype=bool)
        gt[2:6, 3:7] = True
        box = bbox_of(gt)
        miou, macc = metrics([gt], [gt], [(3, 4)], [box])
        assert macc == 1.0
        _, macc2 = metrics([gt], [gt], [(9, 9)], [box])
        assert macc2 == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            metrics([np.zeros((2, 2), dtype=bool)], [])
