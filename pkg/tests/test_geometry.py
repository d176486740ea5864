import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recloud.geometry import (AffineTransform, Neighborhood, affine_apply, as_cloud,
                              compose, denormalize_patches, farthest_point_sample, knn,
                              normalize_patches, patchify)

from oracles import fps_oracle, knn_oracle


def random_cloud(rng, w):
    return rng.standard_normal((w, 3))


class TestCloudValidation:
    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError, match="shape"):
            as_cloud(np.zeros((4, 2)))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            as_cloud(np.zeros((0, 3)))

    def test_rejects_nonfinite(self):
        pts = np.zeros((3, 3))
        pts[1, 2] = np.nan
        with pytest.raises(ValueError, match="finite"):
            as_cloud(pts)


class TestAffineApply:
    def test_identity(self):
        rng = np.random.default_rng(0)
        pts = random_cloud(rng, 32)
        out = affine_apply(pts, AffineTransform.identity())
        np.testing.assert_array_equal(out, pts)

    def test_rotation_90_about_z(self):
        m = np.zeros((3, 4))
        m[0, 1] = -1.0
        m[1, 0] = 1.0
        m[2, 2] = 1.0
        out = affine_apply(np.array([[1.0, 0.0, 0.0]]), AffineTransform(m))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_pure_translation(self):
        m = np.hstack([np.eye(3), np.array([[1.0], [2.0], [3.0]])])
        out = affine_apply(np.array([[0.0, 0.0, 0.0]]), AffineTransform(m))
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_count_preserved(self):
        rng = np.random.default_rng(1)
        pts = random_cloud(rng, 77)
        out = affine_apply(pts, AffineTransform(rng.standard_normal((3, 4))))
        assert out.shape == (77, 3)

    def test_overflow_rejected(self):
        m = np.hstack([np.eye(3) * 1e308, np.zeros((3, 1))])
        with pytest.raises(ValueError, match="non-finite"):
            affine_apply(np.full((2, 3), 1e10), AffineTransform(m))

    def test_composition_matches_matrix_product(self):
        # applying t1 then t2 equals the single composed transform
        rng = np.random.default_rng(2)
        for _ in range(200):
            t1 = AffineTransform(rng.uniform(-2, 2, size=(3, 4)))
            t2 = AffineTransform(rng.uniform(-2, 2, size=(3, 4)))
            pts = random_cloud(rng, 16)
            two_step = affine_apply(affine_apply(pts, t1), t2)
            one_step = affine_apply(pts, compose(t2, t1))
            np.testing.assert_allclose(one_step, two_step, rtol=1e-9, atol=1e-12)


class TestFarthestPointSample:
    def test_three_point_line(self):
        # seed 11 starts at index 0; the farthest point from 0 is index 2
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
        idx = farthest_point_sample(pts, 2, np.random.default_rng(11))
        assert idx.tolist() == [0, 2]

    def test_n_equals_w_is_permutation(self):
        rng = np.random.default_rng(3)
        pts = random_cloud(rng, 17)
        idx = farthest_point_sample(pts, 17, rng)
        assert sorted(idx.tolist()) == list(range(17))

    def test_n_one_returns_seeded_start(self):
        pts = random_cloud(np.random.default_rng(4), 9)
        idx = farthest_point_sample(pts, 1, np.random.default_rng(5))
        start = int(np.random.default_rng(5).integers(9))
        assert idx.tolist() == [start]

    def test_errors(self):
        pts = random_cloud(np.random.default_rng(6), 5)
        with pytest.raises(ValueError):
            farthest_point_sample(pts, 6, np.random.default_rng(0))
        with pytest.raises(ValueError):
            farthest_point_sample(pts, 0, np.random.default_rng(0))

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            w = int(rng.integers(2, 40))
            n = int(rng.integers(1, w + 1))
            pts = random_cloud(rng, w)
            got = farthest_point_sample(pts, n, np.random.default_rng(trial))
            expected = fps_oracle(pts, n, start=int(got[0]))
            assert got.tolist() == expected

    def test_duplicate_points_never_reselected(self):
        pts = np.zeros((6, 3))  # all identical
        idx = farthest_point_sample(pts, 6, np.random.default_rng(8))
        assert sorted(idx.tolist()) == list(range(6))


class TestKnn:
    def test_query_on_cloud_point(self):
        pts = random_cloud(np.random.default_rng(9), 12)
        hood = knn(pts, pts[5], 1)
        assert hood.indices.tolist() == [5]
        assert hood.sq_distances[0] == 0.0

    def test_collinear(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        hood = knn(pts, [0.0, 0, 0], 2)
        assert hood.indices.tolist() == [0, 1]

    def test_k_equals_w(self):
        rng = np.random.default_rng(10)
        pts = random_cloud(rng, 8)
        q = rng.standard_normal(3)
        hood = knn(pts, q, 8)
        assert hood.indices.tolist() == knn_oracle(pts, q, 8)

    def test_errors(self):
        pts = random_cloud(np.random.default_rng(11), 4)
        with pytest.raises(ValueError):
            knn(pts, [0, 0, 0], 5)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(12)
        for trial in range(40):
            w = int(rng.integers(2, 30))
            # quantized coordinates force distance ties
            pts = np.round(rng.standard_normal((w, 3)) * 2) / 2
            q = np.round(rng.standard_normal(3) * 2) / 2
            k = int(rng.integers(1, w + 1))
            hood = knn(pts, q, k)
            assert hood.indices.tolist() == knn_oracle(pts, q, k)
            assert np.all(np.diff(hood.sq_distances) >= 0)

    def test_neighborhood_invariants_enforced(self):
        with pytest.raises(ValueError, match="distinct"):
            Neighborhood(0, np.array([1, 1]), np.array([0.0, 1.0]))
        with pytest.raises(ValueError, match="non-decreasing"):
            Neighborhood(0, np.array([1, 2]), np.array([1.0, 0.0]))


class TestPatchify:
    def test_single_patch_whole_cloud(self):
        rng = np.random.default_rng(13)
        pts = random_cloud(rng, 10)
        ps = patchify(pts, 1, 10, rng)
        assert ps.patches.shape == (1, 10, 3)
        assert sorted(ps.indices[0].tolist()) == list(range(10))

    def test_collinear_pairs(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        ps = patchify(pts, 2, 2, np.random.default_rng(0))
        for i in range(2):
            center_idx = int(ps.indices[i][0])
            assert ps.indices[i].tolist() == knn_oracle(pts, pts[center_idx], 2)

    def test_shape_contract(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            w = int(rng.integers(8, 40))
            n = int(rng.integers(1, w + 1))
            k = int(rng.integers(1, w + 1))
            ps = patchify(random_cloud(rng, w), n, k, rng)
            assert ps.patches.shape == (n, k, 3)
            assert ps.centers.shape == (n, 3)
            assert not ps.normalized

    def test_membership_against_oracle(self):
        rng = np.random.default_rng(15)
        pts = random_cloud(rng, 50)
        ps = patchify(pts, 6, 7, rng)
        for i in range(6):
            assert ps.indices[i].tolist() == knn_oracle(pts, ps.centers[i], 7)
            np.testing.assert_array_equal(ps.patches[i], pts[ps.indices[i]])


class TestPatchNormalization:
    def test_round_trip(self):
        rng = np.random.default_rng(16)
        ps = patchify(random_cloud(rng, 30), 4, 5, rng)
        back = denormalize_patches(normalize_patches(ps))
        np.testing.assert_allclose(back.patches, ps.patches, atol=1e-12)
        assert not back.normalized

    def test_center_maps_to_origin(self):
        rng = np.random.default_rng(17)
        ps = normalize_patches(patchify(random_cloud(rng, 20), 3, 4, rng))
        for i in range(3):
            # the center is its own nearest neighbor: first patch point is 0
            np.testing.assert_allclose(ps.patches[i, 0], np.zeros(3), atol=1e-15)

    def test_single_point_patch(self):
        pts = np.array([[1.0, 2.0, 3.0]])
        ps = normalize_patches(patchify(pts, 1, 1, np.random.default_rng(0)))
        np.testing.assert_array_equal(ps.patches, np.zeros((1, 1, 3)))

    def test_double_normalize_rejected(self):
        rng = np.random.default_rng(18)
        ps = patchify(random_cloud(rng, 10), 2, 3, rng)
        with pytest.raises(ValueError):
            normalize_patches(normalize_patches(ps))
        with pytest.raises(ValueError):
            denormalize_patches(ps)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=2, max_value=64), st.integers(min_value=0, max_value=10**6))
def test_fps_oracle_equivalence_property(w, seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((w, 3))
    n = int(rng.integers(1, w + 1))
    got = farthest_point_sample(pts, n, np.random.default_rng(seed))
    assert got.tolist() == fps_oracle(pts, n, start=int(got[0]))
