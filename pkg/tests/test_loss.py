import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fetrack import autodiff as ad
from fetrack.autodiff import Tensor
from fetrack.errors import ShapeError
from fetrack.heads import make_label
from fetrack.loss import LossReport, bbox_loss, classification_loss, hinge_residual, total_loss

from oracles import hinge_oracle


class TestHinge:
    @pytest.mark.parametrize("s,z,want", [(0.7, 0.5, 0.7 - 0.5), (-0.3, 0.01, 0.0), (0.4, 0.01, 0.4)])
    def test_examples(self, s, z, want):
        assert hinge_residual(s, z) == want

    def test_threshold_is_exclusive(self):
        assert hinge_residual(-1.0, 0.05) == 0.0
        assert hinge_residual(-1.0, 0.0500001) == pytest.approx(-1.0500001)

    def test_random_sweep_matches_closed_form(self, rng):
        s = rng.uniform(-2, 2, 10_000)
        z = rng.uniform(0, 1, 10_000)
        assert all(hinge_residual(a, b) == hinge_oracle(a, b) for a, b in zip(s, z))


class TestClassificationLoss:
    def test_perfect_foreground(self):
        z = np.full((4, 5), 0.5)
        assert classification_loss(Tensor(z[None, None]), z).item() == 0.0

    def test_background_below_zero(self, rng):
        s = -np.abs(rng.normal(size=(1, 1, 4, 5)))
        assert classification_loss(Tensor(s), np.zeros((4, 5))).item() == 0.0

    def test_scalar_loop_oracle(self, rng):
        s = rng.normal(size=(1, 1, 6, 7))
        label = make_label((2.5, 3.0), (30, 30), (6, 7))
        want = sum(hinge_oracle(s[0, 0, i, j], label.z[i, j]) ** 2 for i in range(6) for j in range(7)) / 42
        assert classification_loss(Tensor(s), label).item() == pytest.approx(want, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            classification_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((4, 5)))

    def test_gradient(self, rng):
        s = Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
        label = make_label((2, 2), (20, 20), (5, 5))
        assert ad.grad_check(lambda: classification_loss(s, label), [s]).passed


class TestBoxLoss:
    def test_equal_is_zero(self, rng):
        v = rng.uniform(size=9)
        assert bbox_loss(Tensor(v), v).item() == 0.0

    def test_single_pair(self):
        assert bbox_loss(Tensor([0.3]), [0.5]).item() == pytest.approx(0.04, abs=1e-15)

    def test_loop_oracle(self, rng):
        p, t = rng.uniform(size=50), rng.uniform(size=50)
        want = sum((a - b) ** 2 for a, b in zip(p, t)) / 50
        assert bbox_loss(Tensor(p), t).item() == pytest.approx(want, rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bbox_loss(Tensor([0.1, 0.2]), [0.1])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 30))
    def test_pair_permutation_invariance(self, seed, n):
        rng = np.random.default_rng(seed)
        p, t = rng.uniform(size=n), rng.uniform(size=n)
        perm = rng.permutation(n)
        assert bbox_loss(Tensor(p), t).item() == pytest.approx(bbox_loss(Tensor(p[perm]), t[perm]).item(), rel=1e-13)


class TestTotal:
    @pytest.mark.parametrize("beta", [0.0, 1.0, 100.0])
    def test_zero(self, beta):
        assert total_loss(0.0, 0.0, beta) == 0.0

    def test_example(self):
        assert total_loss(1.0, 2.0, 1.0) == 3.0
        assert total_loss(Tensor(1.0), Tensor(2.0), 10.0).item() == 12.0

    def test_report_row(self):
        r = LossReport(3.0, 1.0, 2.0, 1.0)
        assert r.row(7) == "7,3.0,1.0,2.0"

    def test_zero_iff_perfect(self, rng):
        z = make_label((3, 3), (30, 30), (7, 7)).z
        perfect_scores = np.where(z > 0.05, z, -0.1)[None, None]
        ious = rng.uniform(size=8)
        zero = total_loss(classification_loss(Tensor(perfect_scores), z), bbox_loss(Tensor(ious), ious), 5.0)
        assert zero.item() == 0.0
        bumped = perfect_scores.copy()
        bumped[0, 0, 0, 0] = 0.01  # background cell pushed above zero
        assert total_loss(classification_loss(Tensor(bumped), z), bbox_loss(Tensor(ious), ious), 5.0).item() > 0
