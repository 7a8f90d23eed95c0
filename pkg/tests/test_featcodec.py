import numpy as np
import pytest

from sparselgs.featcodec import FeatureCodec
from sparselgs.scene import Granularity


def unit_rows(rng, n, D):
    x = rng.normal(size=(n, D))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestFit:
    def test_orthogonal_triplet(self):
        feats = np.eye(3)
        codec = FeatureCodec.fit(feats, d=2)
        assert len(codec) == 3
        for f in feats:
            dec, dist = codec.decode(codec.encode(f))
            assert dist == 0.0
            np.testing.assert_array_equal(dec, f)

    def test_duplicates_share_an_entry(self):
        feats = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
        codec = FeatureCodec.fit(feats, d=2)
        assert len(codec) == 2

    def test_full_rank_projection_is_lossless(self):
        rng = np.random.default_rng(0)
        feats = unit_rows(rng, 12, 4)
        codec = FeatureCodec.fit(feats, d=4)
        recon = codec.project(feats) @ codec.components + codec.mean
        np.testing.assert_allclose(recon, feats, atol=1e-10)

    def test_dimension_check(self):
        with pytest.raises(ValueError, match="reduction dimension exceeds input"):
            FeatureCodec.fit(np.eye(3), d=4)

    def test_components_orthonormal(self):
        rng = np.random.default_rng(1)
        codec = FeatureCodec.fit(unit_rows(rng, 50, 16), d=5)
        gram = codec.components @ codec.components.T
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-8)

    def test_single_feature_padding(self):
        codec = FeatureCodec.fit(np.array([[0.0, 1.0, 0.0]]), d=2)
        gram = codec.components @ codec.components.T
        np.testing.assert_allclose(gram, np.eye(2), atol=1e-8)

    def test_codes_bounded(self):
        rng = np.random.default_rng(2)
        codec = FeatureCodec.fit(unit_rows(rng, 100, 32), d=3)
        assert codec.codes.min() >= -1.0 - 1e-5
        assert codec.codes.max() <= 1.0 + 1e-5


class TestBijection:
    def test_unknown_feature_rejected(self):
        codec = FeatureCodec.fit(np.eye(3), d=2)
        with pytest.raises(KeyError, match="unknown feature"):
            codec.encode(np.array([0.5, 0.5, 0.0]))

    def test_distinct_features_distinct_codes(self):
        rng = np.random.default_rng(3)
        feats = unit_rows(rng, 200, 8)
        codec = FeatureCodec.fit(feats, d=2)
        codes = {codec.encode(f).tobytes() for f in feats}
        assert len(codes) == len(codec)

    def test_collision_perturbation_keeps_bijection(self):
        # two distinct vectors with identical projections onto the leading axes
        feats = np.array(
            [
                [1.0, 0.0, 0.0, 0.5],
                [1.0, 0.0, 0.0, -0.5],
                [0.0, 1.0, 0.0, 0.0],
            ]
        )
        # d=1 keeps only the dominant direction; the first two may collide
        codec = FeatureCodec.fit(feats, d=1)
        codes = [codec.encode(f) for f in feats]
        assert len({c.tobytes() for c in codes}) == 3
        for f in feats:
            dec, _ = codec.decode(codec.encode(f))
            np.testing.assert_array_equal(dec, f)

    def test_roundtrip_bit_exact_large(self):
        rng = np.random.default_rng(4)
        feats = unit_rows(rng, 2000, 64)
        codec = FeatureCodec.fit(feats, d=3)
        for f in feats[::97]:
            dec, dist = codec.decode(codec.encode(f))
            assert dist == 0.0
            assert dec.tobytes() == f.tobytes()

    def test_noise_below_half_gap_decodes_exactly(self):
        rng = np.random.default_rng(5)
        feats = unit_rows(rng, 300, 32)
        codec = FeatureCodec.fit(feats, d=3)
        gap = codec.min_pairwise_code_distance()
        assert gap > 0
        for f in feats[::23]:
            code = codec.encode(f)
            noise = rng.normal(size=3)
            noise *= 0.49 * gap / np.linalg.norm(noise)
            dec, dist = codec.decode(code + noise)
            assert dec.tobytes() == f.tobytes()
            assert dist == pytest.approx(np.linalg.norm(noise), rel=1e-9)

    def test_tie_breaks_to_smallest_index(self):
        codec = FeatureCodec.fit(np.eye(2), d=1)
        # midpoint between the two stored codes
        mid = (codec.codes[0] + codec.codes[1]) / 2.0
        dec, _ = codec.decode(mid)
        np.testing.assert_array_equal(dec, codec.features[0])

    def test_decode_batch_matches_scalar(self):
        rng = np.random.default_rng(6)
        feats = unit_rows(rng, 40, 16)
        codec = FeatureCodec.fit(feats, d=3)
        queries = rng.uniform(-1.2, 1.2, size=(9, 7, 3))
        batch, dist = codec.decode_batch(queries)
        for i in range(9):
            for j in range(7):
                one, d1 = codec.decode(queries[i, j])
                np.testing.assert_array_equal(batch[i, j], one)
                assert dist[i, j] == pytest.approx(d1, abs=1e-12)


class TestVarianceOptimality:
    def test_pca_beats_random_projections(self):
        rng = np.random.default_rng(7)
        for D in (4, 5, 6):
            X = rng.normal(size=(40, D)) * rng.uniform(0.2, 3.0, D)
            codec = FeatureCodec.fit(X, d=2)
            centered = X - X.mean(axis=0)
            pca_var = np.sum((centered @ codec.components.T) ** 2)
            for _ in range(500):
                Q, _ = np.linalg.qr(rng.normal(size=(D, 2)))
                rand_var = np.sum((centered @ Q) ** 2)
                assert pca_var >= rand_var - 1e-9


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        feats = unit_rows(rng, 25, 12).astype(np.float32).astype(np.float64)
        codec = FeatureCodec.fit(feats, d=3, granularity=Granularity.part)
        p = tmp_path / "codec.bin"
        codec.save(p)
        assert (tmp_path / "codec.bin.json").exists()
        loaded = FeatureCodec.load(p)
        assert loaded.granularity == Granularity.part
        assert len(loaded) == len(codec)
        # float32-sourced features survive the float32 file format bit-exactly
        np.testing.assert_array_equal(loaded.features, codec.features)
        for f in feats:
            dec, dist = loaded.decode(loaded.encode(f))
            assert dist == 0.0
            assert dec.tobytes() == f.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"JUNKxxxxxxxxxxxxxxxxxxxx")
        with pytest.raises(ValueError, match="bad magic"):
            FeatureCodec.load(p)
