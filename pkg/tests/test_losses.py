import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recloud.autograd import Tensor, backward, finite_difference_check
from recloud.losses import (LossReport, chamfer, loss_all, loss_global, loss_local,
                            loss_nontransformer, loss_whole)

from oracles import chamfer_oracle


class TestChamfer:
    def test_self_distance_zero(self):
        pts = np.random.default_rng(0).standard_normal((20, 3))
        assert float(chamfer(pts, pts).data) == 0.0

    def test_single_points(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        assert float(chamfer(a, b).data) == 2.0

    def test_asymmetric_counts(self):
        a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
        b = np.array([[0.0, 0, 0]])
        # (0 + 4)/2 + 0/1 = 2, confirmed by the brute-force oracle
        assert chamfer_oracle(a, b) == 2.0
        assert float(chamfer(a, b).data) == 2.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((int(rng.integers(1, 30)), 3))
            b = rng.standard_normal((int(rng.integers(1, 30)), 3))
            assert float(chamfer(a, b).data) == pytest.approx(float(chamfer(b, a).data),
                                                              rel=1e-12)

    def test_nonnegative_and_zero_iff_mutual_coverage(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[1.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0]])
        assert float(chamfer(a, b).data) == 0.0
        c = np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]])
        assert float(chamfer(a, c).data) > 0.0

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.standard_normal((int(rng.integers(1, 40)), 3))
            b = rng.standard_normal((int(rng.integers(1, 40)), 3))
            got = float(chamfer(a, b).data)
            want = chamfer_oracle(a, b)
            assert got == pytest.approx(want, rel=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty|shape"):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))

    def test_gradient_fd(self):
        rng = np.random.default_rng(3)
        target = rng.standard_normal((7, 3))
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        err = finite_difference_check(lambda v: chamfer(v, target), x)
        assert err < 1e-3

    def test_permuting_rows_preserves_value(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((10, 3))
        b = rng.standard_normal((12, 3))
        perm = rng.permutation(12)
        assert float(chamfer(a, b).data) == pytest.approx(
            float(chamfer(a, b[perm]).data), rel=1e-12)


class TestLossNonTransformer:
    def test_perfect_reconstruction(self):
        pts = np.random.default_rng(5).standard_normal((15, 3))
        assert float(loss_nontransformer(pts, pts).data) == 0.0

    def test_equals_chamfer(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal((9, 3)), rng.standard_normal((11, 3))
        assert float(loss_nontransformer(a, b).data) == float(chamfer(a, b).data)


class TestLossLocal:
    def test_perfect(self):
        patches = np.random.default_rng(7).standard_normal((4, 6, 3))
        t = Tensor(patches, requires_grad=True)
        assert float(loss_local(t, patches).data) == 0.0

    def test_single_patch_equals_chamfer(self):
        rng = np.random.default_rng(8)
        pred = rng.standard_normal((1, 5, 3))
        gt = rng.standard_normal((1, 5, 3))
        got = float(loss_local(Tensor(pred, requires_grad=True), gt).data)
        assert got == pytest.approx(float(chamfer(pred[0], gt[0]).data), rel=1e-12)

    def test_two_patches_average(self):
        rng = np.random.default_rng(9)
        pred = rng.standard_normal((2, 5, 3))
        gt = rng.standard_normal((2, 5, 3))
        v1 = float(chamfer(pred[0], gt[0]).data)
        v2 = float(chamfer(pred[1], gt[1]).data)
        got = float(loss_local(Tensor(pred, requires_grad=True), gt).data)
        assert got == pytest.approx((v1 + v2) / 2.0, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            loss_local(Tensor(np.zeros((2, 4, 3))), np.zeros((2, 5, 3)))

    def test_gradient_reaches_predictions(self):
        rng = np.random.default_rng(10)
        pred = Tensor(rng.standard_normal((3, 4, 3)), requires_grad=True)
        gt = rng.standard_normal((3, 4, 3))
        err = finite_difference_check(lambda v: loss_local(v, gt), pred)
        assert err < 1e-3


class TestLossGlobal:
    def test_identical_centers(self):
        c = np.random.default_rng(11).standard_normal((8, 3))
        assert float(loss_global(Tensor(c, requires_grad=True), c).data) == 0.0

    def test_reduces_to_chamfer(self):
        rng = np.random.default_rng(12)
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        assert float(loss_global(Tensor(a), b).data) == float(chamfer(a, b).data)

    def test_gt_permutation_invariant(self):
        rng = np.random.default_rng(13)
        pred = Tensor(rng.standard_normal((7, 3)))
        gt = rng.standard_normal((7, 3))
        perm = rng.permutation(7)
        assert float(loss_global(pred, gt).data) == pytest.approx(
            float(loss_global(pred, gt[perm]).data), rel=1e-12)


class TestLossAll:
    def test_weight_zero_reduces_to_local(self):
        local = Tensor(np.asarray(0.7))
        global_ = Tensor(np.asarray(123.0))
        total, report = loss_all(local, global_, 0.0)
        assert float(total.data) == 0.7
        assert report.total == report.local == 0.7

    def test_simple_sum(self):
        total, report = loss_all(Tensor(np.asarray(0.2)), Tensor(np.asarray(0.3)), 1.0)
        assert float(total.data) == pytest.approx(0.5, abs=1e-15)
        assert report.total == pytest.approx(0.5, abs=1e-15)

    def test_report_identity_bit_exact(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            l, g, w = rng.random(), rng.random(), rng.random() * 3
            total, report = loss_all(Tensor(np.asarray(l)), Tensor(np.asarray(g)), w)
            assert report.total == report.local + report.weight * report.global_
            assert float(total.data) == report.total

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            loss_all(Tensor(np.asarray(0.0)), Tensor(np.asarray(0.0)), -0.1)


class TestLossWhole:
    def test_perfect(self):
        pts = np.random.default_rng(15).standard_normal((20, 3))
        assert float(loss_whole(pts, pts).data) == 0.0

    def test_equals_chamfer(self):
        rng = np.random.default_rng(16)
        a, b = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
        assert float(loss_whole(a, b).data) == float(chamfer(a, b).data)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=32), st.integers(min_value=1, max_value=32),
       st.integers(min_value=0, max_value=10**6))
def test_chamfer_symmetry_property(wa, wb, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((wa, 3))
    b = rng.standard_normal((wb, 3))
    ab = float(chamfer(a, b).data)
    ba = float(chamfer(b, a).data)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-15)
