"""Loss oracles: direct-summation BCE, hand values, masking semantics, and
the orthogonality penalty."""

import numpy as np
import pytest

from sedtriadv.autodiff import Parameter, Tensor, backward, sigmoid
from sedtriadv.errors import (
    DegenerateWeights,
    LabelError,
    MaskedOutWarning,
    ShapeError,
)
from sedtriadv.losses import (
    LabelTensor,
    clip_bce,
    domain_bce,
    frame_bce,
    labeler_orthogonality,
    total_classification_loss,
)

from helpers import max_rel_err

LOG2 = float(np.log(2.0))
ORACLE_ATOL = 1e-9


def direct_bce(p, t, mask=None):
    """Plain-python direct summation of the clamped BCE mean."""
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-7, 1 - 1e-7)
    t = np.asarray(t, dtype=np.float64)
    per = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    if mask is None:
        return per.mean()
    m = np.asarray(mask, dtype=np.float64)
    return float((per * m).sum() / m.sum())


class TestClipBce:

    def test_random_case_matches_direct_summation(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, (2, 3))
        y = rng.integers(0, 2, (2, 3)).astype(float)
        got = clip_bce(Tensor(p), LabelTensor(y)).item()
        assert abs(got - direct_bce(p, y)) < ORACLE_ATOL

    def test_perfect_prediction_is_near_zero(self):
        y = np.array([[1.0, 0.0, 1.0]])
        loss = clip_bce(Tensor(y.copy()), LabelTensor(y)).item()
        assert loss < 1e-6

    def test_half_probability_gives_log_two(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = clip_bce(Tensor(np.full((2, 2), 0.5)), LabelTensor(y)).item()
        assert abs(loss - LOG2) < 1e-12

    def test_non_binary_labels_rejected(self):
        with pytest.raises(LabelError):
            LabelTensor(np.array([[0.5]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            clip_bce(Tensor(np.full((2, 3), 0.5)), LabelTensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(11)
        y = rng.integers(0, 2, (3, 4)).astype(float)

        def fn(p):
            return clip_bce(p, LabelTensor(y))

        err = max_rel_err(fn, [rng.uniform(0.1, 0.9, (3, 4))])
        assert err <= 1e-4

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(12)
        p = rng.uniform(0.1, 0.9, (2, 3))
        y = rng.integers(0, 2, (2, 3)).astype(float)
        param = Parameter(p.copy())
        backward(clip_bce(param, LabelTensor(y)))
        want = (p - y) / (p * (1 - p)) / p.size
        np.testing.assert_allclose(param.grad, want, rtol=1e-10)


class TestFrameBce:

    def test_full_mask_equals_unmasked(self):
        rng = np.random.default_rng(13)
        p = rng.uniform(0.05, 0.95, (2, 5, 3))
        y = rng.integers(0, 2, (2, 5, 3)).astype(float)
        a = frame_bce(Tensor(p), LabelTensor(np.zeros((2, 3)), y)).item()
        b = frame_bce(Tensor(p), LabelTensor(np.zeros((2, 3)), y,
                                             np.ones_like(y))).item()
        assert a == b

    def test_masked_loss_equals_loss_on_kept_subset(self):
        rng = np.random.default_rng(14)
        p = rng.uniform(0.05, 0.95, (1, 8, 2))
        y = rng.integers(0, 2, (1, 8, 2)).astype(float)
        mask = np.zeros_like(y)
        mask[:, :4, :] = 1.0
        got = frame_bce(Tensor(p), LabelTensor(np.zeros((1, 2)), y, mask)).item()
        kept = frame_bce(Tensor(p[:, :4]),
                         LabelTensor(np.zeros((1, 2)), y[:, :4])).item()
        assert got == kept

    def test_masked_entries_get_zero_gradient(self):
        rng = np.random.default_rng(15)
        p = Parameter(rng.uniform(0.2, 0.8, (1, 4, 2)))
        y = rng.integers(0, 2, (1, 4, 2)).astype(float)
        mask = np.zeros_like(y)
        mask[0, 0, 0] = mask[0, 3, 1] = 1.0
        backward(frame_bce(p, LabelTensor(np.zeros((1, 2)), y, mask)))
        assert np.all((p.grad != 0) == (mask == 1))

    def test_all_masked_returns_zero_with_signal(self):
        y = np.ones((1, 2, 2))
        with pytest.warns(MaskedOutWarning):
            loss = frame_bce(Tensor(np.full((1, 2, 2), 0.7)),
                             LabelTensor(np.ones((1, 2)), y, np.zeros_like(y)))
        assert loss.item() == 0.0

    def test_half_probability_gives_log_two(self):
        y = np.zeros((1, 6, 2))
        y[0, 2:4, 1] = 1.0  # one frame-accurate event
        loss = frame_bce(Tensor(np.full((1, 6, 2), 0.5)),
                         LabelTensor(np.zeros((1, 2)), y)).item()
        assert abs(loss - LOG2) < 1e-12

    def test_missing_frame_labels_rejected(self):
        with pytest.raises(LabelError):
            frame_bce(Tensor(np.full((1, 2, 2), 0.5)), LabelTensor(np.zeros((1, 2))))

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            LabelTensor(np.zeros((1, 2)), np.zeros((1, 4, 2)), np.zeros((1, 3, 2)))


class TestTotalClassificationLoss:

    def test_weak_clip_equals_clip_bce(self):
        rng = np.random.default_rng(16)
        cp = rng.uniform(0.1, 0.9, (2, 3))
        y = LabelTensor(rng.integers(0, 2, (2, 3)).astype(float))
        total = total_classification_loss(Tensor(cp), Tensor(np.zeros((2, 4, 3))), y)
        assert total.item() == clip_bce(Tensor(cp), y).item()

    def test_strong_clip_is_sum_of_terms(self):
        rng = np.random.default_rng(17)
        cp = rng.uniform(0.1, 0.9, (2, 3))
        fp = rng.uniform(0.1, 0.9, (2, 5, 3))
        fy = rng.integers(0, 2, (2, 5, 3)).astype(float)
        labels = LabelTensor(fy.max(axis=1), fy)
        total = total_classification_loss(Tensor(cp), Tensor(fp), labels).item()
        want = clip_bce(Tensor(cp), labels).item() + \
            frame_bce(Tensor(fp), labels).item()
        assert abs(total - want) < 1e-12

    def test_perfect_predictions_near_zero(self):
        fy = np.zeros((1, 4, 2))
        fy[0, 1:3, 0] = 1.0
        labels = LabelTensor(fy.max(axis=1), fy)
        total = total_classification_loss(
            Tensor(fy.max(axis=1).copy()), Tensor(fy.copy()), labels).item()
        assert total < 1e-5


class TestDomainBce:

    def test_half_probability_whole_mode(self):
        loss = domain_bce(Tensor(np.full(4, 0.5)), np.array([0, 1, 0, 1.0]))
        assert abs(loss.item() - LOG2) < 1e-12

    def test_time_mode_two_frames(self):
        loss = domain_bce(Tensor(np.full((1, 2), 0.5)), np.array([1.0]))
        assert abs(loss.item() - LOG2) < 1e-12

    def test_random_time_batch_matches_direct_summation(self):
        rng = np.random.default_rng(18)
        p = rng.uniform(0.05, 0.95, (3, 7))
        d = rng.integers(0, 2, 3).astype(float)
        got = domain_bce(Tensor(p), d).item()
        want = direct_bce(p, np.broadcast_to(d[:, None], p.shape))
        assert abs(got - want) < ORACLE_ATOL

    def test_gradient_through_sigmoid(self):
        rng = np.random.default_rng(19)
        d = rng.integers(0, 2, 4).astype(float)

        def fn(z):
            return domain_bce(sigmoid(z), d)

        assert max_rel_err(fn, [rng.uniform(-2, 2, (4,))]) <= 1e-4

    def test_non_binary_domain_rejected(self):
        with pytest.raises(LabelError):
            domain_bce(Tensor(np.full(2, 0.5)), np.array([0.0, 0.3]))


class TestOrthogonality:

    def test_orthogonal_gives_zero(self):
        v = labeler_orthogonality(Tensor(np.array([1.0, 0.0])),
                                  Tensor(np.array([0.0, 2.0])))
        assert v.item() == 0.0

    def test_parallel_gives_one(self):
        w = np.array([0.3, -1.2, 0.7])
        v = labeler_orthogonality(Tensor(w), Tensor(2.5 * w))
        assert abs(v.item() - 1.0) < 1e-12

    def test_hand_case_inverse_sqrt_two(self):
        v = labeler_orthogonality(Tensor(np.array([1.0, 0.0])),
                                  Tensor(np.array([1.0, 1.0])))
        assert abs(v.item() - 1.0 / np.sqrt(2.0)) < 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(20)
        w1 = rng.normal(size=12)
        w2 = rng.normal(size=12)
        base = labeler_orthogonality(Tensor(w1), Tensor(w2)).item()
        for c in (3.7, -0.2, 1e-3):
            scaled = labeler_orthogonality(Tensor(c * w1), Tensor(w2)).item()
            assert abs(scaled - base) <= 1e-12

    def test_range_zero_one(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            v = labeler_orthogonality(Tensor(rng.normal(size=6)),
                                      Tensor(rng.normal(size=6))).item()
            assert 0.0 <= v <= 1.0

    def test_matrix_weights_are_flattened(self):
        rng = np.random.default_rng(22)
        w1 = rng.normal(size=(3, 4))
        w2 = rng.normal(size=(3, 4))
        a = labeler_orthogonality(Tensor(w1), Tensor(w2)).item()
        b = labeler_orthogonality(Tensor(w1.reshape(-1)),
                                  Tensor(w2.reshape(-1))).item()
        assert a == b

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateWeights):
            labeler_orthogonality(Tensor(np.zeros(3)), Tensor(np.ones(3)))

    def test_size_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            labeler_orthogonality(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(23)

        def fn(a, b):
            return labeler_orthogonality(a, b)

        err = max_rel_err(fn, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])
        assert err <= 1e-4

    def test_gradient_descends_toward_orthogonality(self):
        rng = np.random.default_rng(24)
        w1 = Parameter(rng.normal(size=8))
        w2 = Parameter(rng.normal(size=8))
        from sedtriadv.optim import Adam
        opt = Adam([w1, w2], lr=0.05)
        for _ in range(200):
            opt.zero_grad()
            backward(labeler_orthogonality(w1, w2))
            opt.step()
        assert labeler_orthogonality(w1, w2).item() < 1e-3
