import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparselgs.alignment import (
    CandidatePair,
    FeatureStore,
    Mask,
    MaskSet,
    MatchGraph,
    PixelMatchField,
    lang_score,
    match_score,
    rle_decode,
    rle_encode,
    step1_pixel_vote,
    step2_fuse,
    step3_reproject_refine,
)
from sparselgs.scene import Camera, Granularity, PipelineConfig

CFG = PipelineConfig()


def bitmap(shape, coords):
    b = np.zeros(shape, dtype=bool)
    for y, x in coords:
        b[y, x] = True
    return b


def rect(shape, y0, y1, x0, x1):
    b = np.zeros(shape, dtype=bool)
    b[y0:y1, x0:x1] = True
    return b


def identity_field(view_i, view_j, shape):
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    targets = np.stack([xs, ys], axis=-1).astype(float)
    return PixelMatchField(view_i, view_j, targets, np.ones(shape, dtype=bool))


class TestRLE:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        b = rng.random((13, 17)) < 0.4
        assert np.array_equal(rle_decode(rle_encode(b), b.shape), b)

    def test_empty(self):
        assert rle_encode(np.zeros((4, 4), dtype=bool)) == []


class TestScoring:
    def test_match_score_worked_examples(self):
        assert match_score(1.0, 0.5, 0.3) == pytest.approx(0.65)
        assert match_score(0.0, 0.4, 0.3) == pytest.approx(0.28)

    def test_lang_score_clamped(self):
        store = FeatureStore()
        a = store.add([1.0, 0.0])
        b = store.add([-1.0, 0.0])
        assert lang_score(store, a, b) == 0.0
        assert lang_score(store, a, a) == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)
    )
    def test_score_range_and_monotonicity(self, sl, sa, sl2, sa2, lam):
        s = match_score(sl, sa, lam)
        assert 0.0 <= s <= 1.0 + 1e-9
        if sl2 >= sl and sa2 >= sa:
            assert match_score(sl2, sa2, lam) >= s - 1e-12


class TestFeatureStore:
    def test_normalizes_far_from_unit(self):
        store = FeatureStore()
        fid = store.add([0.5, 0.0, 0.0])
        assert np.linalg.norm(store[fid]) == pytest.approx(1.0)

    def test_keeps_bits_when_already_unit(self):
        v = np.zeros(4)
        v[2] = 1.0
        store = FeatureStore()
        fid = store.add(v)
        assert store[fid].tobytes() == v.tobytes()

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            FeatureStore().add([0.0, 0.0])


class TestMaskSet:
    def test_rejects_overlap(self):
        shape = (8, 8)
        with pytest.raises(ValueError, match="overlap"):
            MaskSet(0, Granularity.whole, [
                Mask(1, rect(shape, 0, 4, 0, 4), 0),
                Mask(2, rect(shape, 2, 6, 2, 6), 1),
            ])

    def test_rejects_empty_mask(self):
        with pytest.raises(ValueError, match="empty"):
            MaskSet(0, Granularity.whole, [Mask(1, np.zeros((4, 4), dtype=bool), 0)])

    def test_label_map_roundtrip(self):
        shape = (8, 8)
        ms = MaskSet(0, Granularity.part, [
            Mask(3, rect(shape, 0, 2, 0, 2), 7),
            Mask(5, rect(shape, 4, 6, 4, 6), 9),
        ])
        labels = ms.label_map()
        back = MaskSet.from_label_map(0, Granularity.part, labels, {3: 7, 5: 9})
        assert [m.mask_id for m in back.masks] == [3, 5]
        np.testing.assert_array_equal(back.label_map(), labels)


class TestStep1:
    def test_perfect_match_accepted(self):
        shape = (10, 10)
        store = FeatureStore()
        f = store.add(np.eye(8)[0])
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 2, 6, 2, 6), f)])
        dst = MaskSet(1, Granularity.whole, [Mask(1, rect(shape, 2, 6, 2, 6), f)])
        pairs = step1_pixel_vote(src, dst, identity_field(0, 1, shape), store, CFG)
        assert len(pairs) == 1
        p = pairs[0]
        assert p.s_area == pytest.approx(1.0)
        assert p.s_lang == pytest.approx(1.0)
        assert p.s_match == pytest.approx(1.0)
        assert p.accepted

    def test_half_area_same_feature(self):
        # all source pixels land in the target, but cover only half of it
        shape = (10, 10)
        store = FeatureStore()
        f = store.add(np.eye(8)[1])
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 2, 0, 4), f)])
        dst = MaskSet(1, Granularity.whole, [Mask(2, rect(shape, 0, 4, 0, 4), f)])
        (p,) = step1_pixel_vote(src, dst, identity_field(0, 1, shape), store, CFG)
        assert p.s_area == pytest.approx(0.5)
        assert p.s_match == pytest.approx(0.65)
        assert p.accepted  # 0.65 > 0.5

    def test_orthogonal_features_rejected(self):
        shape = (10, 10)
        store = FeatureStore()
        fa = store.add(np.eye(8)[2])
        fb = store.add(np.eye(8)[3])
        # 4 of 4 source pixels land in a 10-pixel target: s_area = 0.4
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 1, 0, 4), fa)])
        dst = MaskSet(1, Granularity.whole, [Mask(2, rect(shape, 0, 1, 0, 10), fb)])
        (p,) = step1_pixel_vote(src, dst, identity_field(0, 1, shape), store, CFG)
        assert p.s_area == pytest.approx(0.4)
        assert p.s_lang == 0.0
        assert p.s_match == pytest.approx(0.28)
        assert not p.accepted

    def test_no_valid_pixels_yields_no_candidate(self):
        shape = (6, 6)
        store = FeatureStore()
        f = store.add(np.eye(4)[0])
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 2, 0, 2), f)])
        dst = MaskSet(1, Granularity.whole, [Mask(1, rect(shape, 4, 6, 4, 6), f)])
        field = identity_field(0, 1, shape)
        field.valid[:] = False
        assert step1_pixel_vote(src, dst, field, store, CFG) == []

    def test_vote_picks_majority_target(self):
        shape = (6, 9)
        store = FeatureStore()
        f = store.add(np.eye(4)[0])
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 3, 0, 3), f)])
        # target A receives 6 pixels, target B receives 3
        dst = MaskSet(1, Granularity.whole, [
            Mask(1, rect(shape, 0, 2, 0, 3), f),
            Mask(2, rect(shape, 2, 3, 0, 3), f),
        ])
        (p,) = step1_pixel_vote(src, dst, identity_field(0, 1, shape), store, CFG)
        assert p.mask_j == 1

    def test_granularity_mismatch_rejected(self):
        shape = (4, 4)
        store = FeatureStore()
        f = store.add(np.eye(4)[0])
        a = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 2, 0, 2), f)])
        b = MaskSet(1, Granularity.part, [Mask(1, rect(shape, 0, 2, 0, 2), f)])
        with pytest.raises(ValueError, match="granularity"):
            step1_pixel_vote(a, b, identity_field(0, 1, shape), store, CFG)


class TestStep2:
    def _pairs(self, accepted=True):
        return [
            CandidatePair(0, 1, Granularity.whole, 1, 7, 0.9, 1.0, 0.93, accepted),
            CandidatePair(0, 1, Granularity.whole, 2, 7, 0.8, 1.0, 0.86, accepted),
        ]

    def test_both_sources_fused(self):
        shape = (8, 8)
        store = FeatureStore()
        fa, fb, fj = (store.add(np.eye(4)[i]) for i in range(3))
        src = MaskSet(0, Granularity.whole, [
            Mask(1, rect(shape, 0, 2, 0, 4), fa),
            Mask(2, rect(shape, 2, 4, 0, 4), fb),
        ])
        dst = MaskSet(1, Granularity.whole, [Mask(7, rect(shape, 0, 4, 0, 4), fj)])
        before = sum(m.area for m in src.masks)
        fused, pairs = step2_fuse(src, dst, self._pairs(), CFG)
        assert len(fused.masks) == 1
        m = fused.masks[0]
        assert m.mask_id == 1  # smallest member id survives
        assert m.feature_ref == fj  # takes the target's semantics
        assert m.area == before  # pixel count preserved
        assert {(p.mask_i, p.mask_j) for p in pairs} == {(1, 7)}

    def test_one_to_one_pairs_unchanged(self):
        shape = (8, 8)
        store = FeatureStore()
        fa, fj = store.add(np.eye(4)[0]), store.add(np.eye(4)[1])
        src = MaskSet(0, Granularity.whole, [Mask(1, rect(shape, 0, 2, 0, 4), fa)])
        dst = MaskSet(1, Granularity.whole, [Mask(7, rect(shape, 0, 4, 0, 4), fj)])
        pairs = [CandidatePair(0, 1, Granularity.whole, 1, 7, 0.9, 1.0, 0.93, True)]
        fused, _ = step2_fuse(src, dst, pairs, CFG)
        assert [m.mask_id for m in fused.masks] == [1]
        assert fused.masks[0].feature_ref == fa

    def test_fine_granularity_passes_through(self):
        shape = (8, 8)
        store = FeatureStore()
        fa, fb, fj = (store.add(np.eye(4)[i]) for i in range(3))
        src = MaskSet(0, Granularity.part, [
            Mask(1, rect(shape, 0, 2, 0, 4), fa),
            Mask(2, rect(shape, 2, 4, 0, 4), fb),
        ])
        dst = MaskSet(1, Granularity.part, [Mask(7, rect(shape, 0, 4, 0, 4), fj)])
        pairs = [
            CandidatePair(0, 1, Granularity.part, 1, 7, 0.9, 1.0, 0.93, True),
            CandidatePair(0, 1, Granularity.part, 2, 7, 0.8, 1.0, 0.86, True),
        ]
        fused, out = step2_fuse(src, dst, pairs, CFG)
        assert fused is src
        assert out is pairs

    def test_rejected_pairs_do_not_fuse(self):
        shape = (8, 8)
        store = FeatureStore()
        fa, fb, fj = (store.add(np.eye(4)[i]) for i in range(3))
        src = MaskSet(0, Granularity.whole, [
            Mask(1, rect(shape, 0, 2, 0, 4), fa),
            Mask(2, rect(shape, 2, 4, 0, 4), fb),
        ])
        dst = MaskSet(1, Granularity.whole, [Mask(7, rect(shape, 0, 4, 0, 4), fj)])
        fused, _ = step2_fuse(src, dst, self._pairs(accepted=False), CFG)
        assert len(fused.masks) == 2


def two_view_geometry(shape=(24, 24)):
    """Two cameras looking at two small planar squares; exact 3D points."""
    h, w = shape
    f = 30.0
    cams = {
        0: Camera.look_at([0, 0, -4], [0, 0, 0], [0, 1, 0], f, f, (w - 1) / 2, (h - 1) / 2, w, h),
        1: Camera.look_at([0.6, 0.1, -3.9], [0, 0, 0], [0, 1, 0], f, f, (w - 1) / 2, (h - 1) / 2, w, h),
    }
    # two squares in the z=0 plane
    centers = {1: np.array([-0.6, 0.0, 0.0]), 2: np.array([0.7, 0.1, 0.0])}
    half = 0.3
    masksets, points = {}, {}
    store = FeatureStore()
    refs = {1: store.add(np.eye(8)[0]), 2: store.add(np.eye(8)[1])}
    for v, cam in cams.items():
        pts = np.full((h, w, 3), np.nan)
        valid = np.zeros((h, w), dtype=bool)
        labels = np.zeros((h, w), dtype=np.uint16)
        # ray-cast each pixel onto the z=0 plane
        ys, xs = np.mgrid[0:h, 0:w]
        dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs, float)], axis=-1)
        Rt = cam.rotation.T
        origin = -Rt @ cam.translation
        dirs_world = dirs_cam @ cam.rotation
        t_hit = (0.0 - origin[2]) / dirs_world[..., 2]
        hit = origin[None, None, :] + t_hit[..., None] * dirs_world
        for mid, c in centers.items():
            inside = (np.abs(hit[..., 0] - c[0]) <= half) & (np.abs(hit[..., 1] - c[1]) <= half)
            labels[inside] = mid
            pts[inside] = hit[inside]
            valid |= inside
        masksets[v] = MaskSet.from_label_map(v, Granularity.whole, labels, refs)
        points[v] = (np.nan_to_num(pts), valid)
    return cams, masksets, points, store


class TestStep3:
    def test_consistent_pairs_retained_and_grouped(self):
        cams, masksets, points, store = two_view_geometry()
        graph = step3_reproject_refine(masksets, points, cams, store, CFG)
        accepted = {(p.view_i, p.mask_i, p.view_j, p.mask_j) for p in graph.pairs}
        assert (0, 1, 1, 1) in accepted
        assert (0, 2, 1, 2) in accepted
        assert graph.group_of((0, 1)) == graph.group_of((1, 1))
        assert graph.group_of((0, 2)) == graph.group_of((1, 2))
        assert graph.group_of((0, 1)) != graph.group_of((0, 2))
        for p in graph.pairs:
            assert p.s_match > CFG.reproject_threshold

    def test_threshold_drops_pair(self):
        cams, masksets, points, store = two_view_geometry()
        cfg = PipelineConfig(reproject_threshold=1.0)  # acceptance is strict ">"
        graph = step3_reproject_refine(masksets, points, cams, store, cfg)
        # nothing clears an impossible threshold; every mask stays a singleton
        assert all(len(g) == 1 for g in graph.groups().values())

    def test_bilateral_inconsistency_drops_pair(self):
        cams, masksets, points, store = two_view_geometry()
        # corrupt view 1's points so its masks back-project onto each other's region
        pts, valid = points[1]
        swapped = pts.copy()
        m1 = masksets[1].by_id()[1].bitmap
        m2 = masksets[1].by_id()[2].bitmap
        # move mask 1's points onto mask 2's 3D location and vice versa
        delta = np.array([1.3, 0.1, 0.0])
        swapped[m1] += delta
        swapped[m2] -= delta
        points = dict(points)
        points[1] = (swapped, valid)
        graph = step3_reproject_refine(masksets, points, cams, store, CFG)
        # forward vote from view 0 still lands on the right mask by area, but
        # the back-projection now points at the other mask, so pairs drop
        assert all(not p.accepted or p.view_i != 0 for p in graph.pairs) or not graph.pairs

    def test_too_few_points_keeps_prior(self):
        cams, masksets, points, store = two_view_geometry()
        pts, valid = points[0]
        points = dict(points)
        points[0] = (pts, np.zeros_like(valid))  # nothing projectable from view 0
        prior = [CandidatePair(0, 1, Granularity.whole, 1, 1, 0.9, 1.0, 0.93, True)]
        graph = step3_reproject_refine(masksets, points, cams, store, CFG, prior_pairs=prior)
        kept = {(p.view_i, p.mask_i, p.view_j, p.mask_j) for p in graph.pairs}
        assert (0, 1, 1, 1) in kept


class TestMatchGraph:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_union_find_is_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        graph = MatchGraph(Granularity.whole)
        nodes = [(v, m) for v in range(3) for m in range(1, 6)]
        for n in nodes:
            graph.add_node(n)
        for _ in range(12):
            a, b = rng.integers(0, len(nodes), 2)
            graph.union(nodes[a], nodes[b])
        groups = graph.groups()
        # symmetric + transitive: group_of agrees with the partition
        seen = {}
        for root, members in groups.items():
            for m in members:
                assert graph.group_of(m) == root
                assert m not in seen
                seen[m] = root
        assert set(seen) == set(nodes)

    def test_deterministic_graph(self):
        cams, masksets, points, store = two_view_geometry()
        g1 = step3_reproject_refine(masksets, points, cams, store, CFG)
        g2 = step3_reproject_refine(masksets, points, cams, store, CFG)
        assert g1.to_json() == g2.to_json()
