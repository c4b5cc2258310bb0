"""Tests for marginal, exclusion and full-label losses"""
import numpy as np
import pytest

from src.cosst.core import LabelMap, ProbMap
from src.cosst.exceptions import InvalidInputError
from src.cosst.losses import (
    CE_CLAMP,
    LossReport,
    cross_entropy_loss,
    exclusion_loss,
    fulllabel_loss,
    merge_channels,
    soft_dice_loss,
    stage1_loss,
)
from tests.conftest import random_labels, random_probs


def _numeric_probs_grad(loss, probs, h=1e-6):
    grad = np.zeros_like(probs)
    flat = probs.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = loss(probs)
        flat[i] = original - h
        minus = loss(probs)
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestMergeChannels:
    """Folding unannotated planes into background"""

    def test_layout(self):
        probs = np.stack([np.full((2, 2), v) for v in (0.1, 0.2, 0.3, 0.4)])
        merged = merge_channels(probs, {2})
        assert merged.shape == (2, 2, 2)
        assert np.allclose(merged[0], 0.1 + 0.2 + 0.4)
        assert np.allclose(merged[1], 0.3)

    @pytest.mark.parametrize("seed", range(10))
    def test_merged_planes_stay_a_simplex(self, seed):
        rng = np.random.default_rng(seed)
        channels = int(rng.integers(3, 7))
        annotated = set(rng.choice(np.arange(1, channels), size=int(rng.integers(1, channels)), replace=False).tolist())
        merged = merge_channels(ProbMap(random_probs(rng, channels)), annotated)
        assert isinstance(merged, ProbMap)
        assert np.abs(merged.probs.sum(axis=0) - 1).max() < 1e-6

    def test_rejects_out_of_range_classes(self):
        with pytest.raises(InvalidInputError):
            merge_channels(np.full((3, 2, 2), 1 / 3), {3})
        with pytest.raises(InvalidInputError):
            merge_channels(np.full((3, 2, 2), 1 / 3), set())


class TestDiceAndCrossEntropy:
    """Soft Dice and clamped cross-entropy"""

    def test_perfect_dice(self):
        target = np.array([[1.0, 0.0], [1.0, 1.0]])
        loss, _ = soft_dice_loss(target, target)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_dice(self):
        loss, _ = soft_dice_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        assert loss == pytest.approx(1.0, abs=1e-4)

    def test_cross_entropy_value(self):
        probs = np.stack([np.full((1, 2), 0.25), np.full((1, 2), 0.75)])
        loss, _, saturated = cross_entropy_loss(probs, np.array([[1, 1]]))
        assert loss == pytest.approx(-np.log(0.75))
        assert not saturated

    def test_partial_overlap_dice(self):
        loss, _ = soft_dice_loss(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 1.0], [0.0, 0.0]]))
        assert loss == pytest.approx(1.0 - (2 + 1e-5) / (3 + 1e-5), abs=1e-12)
        assert loss == pytest.approx(1.0 / 3.0, abs=1e-4)

    def test_uniform_probabilities_cost_log_of_class_count(self):
        probs = np.full((3, 4, 4), 1.0 / 3.0)
        loss, _, saturated = cross_entropy_loss(probs, np.zeros((4, 4), dtype=int))
        assert loss == pytest.approx(np.log(3.0), abs=1e-12)
        assert loss == pytest.approx(1.0986, abs=1e-4)
        assert not saturated

    def test_confidently_wrong_prediction_saturates(self):
        probs = np.zeros((3, 2, 2))
        probs[0] = 1.0
        loss, grad, saturated = cross_entropy_loss(probs, np.full((2, 2), 2))
        assert loss == pytest.approx(-np.log(1e-12))
        assert loss == pytest.approx(27.631, abs=1e-3)
        assert saturated
        assert not grad.any()

    def test_clamped_pixel_has_zero_gradient(self):
        probs = np.stack([np.array([[1.0, 0.5]]), np.array([[0.0, 0.5]])])
        loss, grad, saturated = cross_entropy_loss(probs, np.array([[1, 1]]))
        assert saturated
        assert loss == pytest.approx((-np.log(CE_CLAMP) - np.log(0.5)) / 2)
        assert grad[:, 0, 0].tolist() == [0.0, 0.0]
        assert grad[1, 0, 1] == pytest.approx(-1.0 / (2 * 0.5))


class TestExclusionLoss:
    """Penalty on unannotated-class probability inside the labeled union"""

    def test_empty_union_contributes_zero(self):
        rng = np.random.default_rng(0)
        value, grad = exclusion_loss(random_probs(rng, 4), {1}, np.zeros((6, 6), dtype=bool))
        assert value == 0.0
        assert not grad.any()

    def test_no_unannotated_classes(self):
        rng = np.random.default_rng(1)
        value, _ = exclusion_loss(random_probs(rng, 3), {1, 2}, np.ones((6, 6), dtype=bool))
        assert value == 0.0

    def test_overlap_drives_value(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2] = True
        inside = np.zeros((3, 4, 4))
        inside[0] = 1.0
        inside[2][mask] = 1.0
        inside[0][mask] = 0.0
        outside = np.zeros((3, 4, 4))
        outside[0] = 1.0
        high, _ = exclusion_loss(inside, {1}, mask)
        low, _ = exclusion_loss(outside, {1}, mask)
        assert high == pytest.approx(1.0, abs=1e-4)
        assert low == pytest.approx(0.0, abs=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_more_unannotated_mass_inside_union_never_lowers_the_term(self, seed):
        rng = np.random.default_rng(200 + seed)
        probs = random_probs(rng, 4)
        mask = rng.uniform(size=(6, 6)) < 0.4
        mask[0, 0] = True
        base, grad = exclusion_loss(probs, {1}, mask)
        assert (grad[2:][:, mask] >= 0).all()
        for u in (2, 3):
            for row, col in np.argwhere(mask)[:5]:
                bumped = probs.copy()
                bumped[u, row, col] += 0.05
                value, _ = exclusion_loss(bumped, {1}, mask)
                assert value >= base

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            exclusion_loss(np.full((2, 3, 3), 0.5), {1}, np.zeros((2, 2)))


class TestStage1Loss:
    """Marginal plus exclusion supervision"""

    @pytest.mark.parametrize("seed", range(100))
    def test_reduces_to_full_label_loss_when_fully_annotated(self, seed):
        rng = np.random.default_rng(seed)
        channels = int(rng.integers(2, 6))
        probs = random_probs(rng, channels)
        label = random_labels(rng, range(channels))
        partial, partial_grad = stage1_loss(probs, label, range(1, channels))
        full, full_grad = fulllabel_loss(probs, label)
        assert abs(partial.total - full.total) <= 1e-12
        assert partial.exclusion_term == 0.0
        assert np.abs(partial_grad - full_grad).max() <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        probs = random_probs(rng, 4)
        label = random_labels(rng, {0, 2})
        _, analytic = stage1_loss(probs, label, {2}, 1.0, 0.7)
        numeric = _numeric_probs_grad(lambda p: stage1_loss(p, label, {2}, 1.0, 0.7)[0].total, probs.copy())
        assert _relative_error(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_full_label_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(50 + seed)
        probs = random_probs(rng, 3)
        label = random_labels(rng, {0, 1, 2})
        _, analytic = fulllabel_loss(probs, label)
        numeric = _numeric_probs_grad(lambda p: fulllabel_loss(p, label)[0].total, probs.copy())
        assert _relative_error(analytic, numeric) < 1e-4

    def test_weights_scale_terms(self):
        rng = np.random.default_rng(4)
        probs = random_probs(rng, 4)
        label = random_labels(rng, {0, 1})
        base, _ = stage1_loss(probs, label, {1})
        scaled, _ = stage1_loss(probs, label, {1}, marginal_weight=2.0, exclusion_weight=0.0)
        assert scaled.marginal_term == pytest.approx(2 * base.marginal_term)
        assert scaled.exclusion_term == 0.0

    def test_rejects_labels_of_unannotated_classes(self):
        probs = np.full((3, 2, 2), 1 / 3)
        with pytest.raises(InvalidInputError, match="not all annotated"):
            stage1_loss(probs, LabelMap(np.array([[0, 2], [0, 0]])), {1})


class TestLossReport:
    """Averaging and CSV rows"""

    def test_mean(self):
        reports = [LossReport(1.0, 0.5, 0.5, (0.1, 0.2)), LossReport(3.0, 2.0, 1.0, (0.3, 0.4), saturated=True)]
        mean = LossReport.mean(reports)
        assert mean.total == 2.0
        assert mean.exclusion_term == 0.75
        assert mean.per_class_dice_terms == pytest.approx((0.2, 0.3))
        assert mean.saturated

    def test_csv_row(self):
        assert LossReport(1.5, 1.0, 0.5).csv_row(3, "initial") == [3, "initial", "1.5", "1.0", "0.5", 0]
