import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import metrics_by_enumeration
from vmseg.errors import ContractError, DimensionError
from vmseg.metrics import METRIC_NAMES, ConfusionCounts, confusion_counts, confusion_metrics, metrics_from_counts


def pair_with_counts(tp, fp, fn, tn):
    y = np.array([1] * tp + [0] * fp + [1] * fn + [0] * tn)
    y_hat = np.array([1] * tp + [1] * fp + [0] * fn + [0] * tn)
    return y, y_hat


class TestExamples:
    def test_sixteen_pixels(self):
        y, y_hat = pair_with_counts(2, 1, 2, 11)
        counts, m = confusion_metrics(y.reshape(4, 4), y_hat.reshape(4, 4))
        assert counts == ConfusionCounts(2, 1, 2, 11)
        assert m.precision == pytest.approx(2 / 3, abs=1e-15)
        assert m.recall == 0.5
        assert m.iou == pytest.approx(2 / 5, abs=1e-15)
        assert m.dice == pytest.approx(4 / 7, abs=1e-15)
        assert m.accuracy == 13 / 16
        assert m.degenerate == ()

    def test_perfect_match(self):
        y = np.zeros((4, 4))
        y[1:3, 1:3] = 1
        _, m = confusion_metrics(y, y)
        assert all(v == 1.0 for v in m.as_dict().values())

    def test_disjoint(self):
        y, y_hat = np.zeros(8), np.zeros(8)
        y[:3], y_hat[5:] = 1, 1
        _, m = confusion_metrics(y, y_hat)
        assert m.iou == m.dice == 0.0

    def test_both_empty_is_one_and_flagged(self):
        _, m = confusion_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
        assert m.iou == m.dice == m.precision == m.recall == 1.0
        assert set(m.degenerate) == {"iou", "dice", "precision", "recall"}

    def test_empty_truth_with_predictions_is_zero_and_flagged(self):
        y_hat = np.zeros(9)
        y_hat[0] = 1
        _, m = confusion_metrics(np.zeros(9), y_hat)
        assert m.recall == 0.0 and m.iou == 0.0 and m.degenerate == ("recall",)

    @pytest.mark.parametrize("bad", [np.array([0, 0.5]), np.array([2, 0]), np.array([np.nan, 1])])
    def test_non_binary_rejected(self, bad):
        with pytest.raises(ContractError):
            confusion_metrics(bad, np.zeros(2))
        with pytest.raises(ContractError):
            confusion_metrics(np.zeros(2), bad)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            confusion_counts(np.zeros((2, 2)), np.zeros(4))

    def test_counts_add(self):
        assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40) == ConfusionCounts(11, 22, 33, 44)


class TestOracle:
    def test_thousand_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            density = rng.random(2)
            y = (rng.random((16, 16)) < density[0]).astype(np.float32)
            y_hat = (rng.random((16, 16)) < density[1]).astype(np.float32)
            counts, m = confusion_metrics(y, y_hat)
            ref = metrics_by_enumeration(y, y_hat)
            assert (counts.tp, counts.fp, counts.fn, counts.tn) == (ref["tp"], ref["fp"], ref["fn"], ref["tn"])
            for name in METRIC_NAMES:
                assert abs(getattr(m, name) - ref[name]) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(tp=st.integers(0, 300), fp=st.integers(0, 300), fn=st.integers(0, 300), tn=st.integers(0, 300))
    def test_identities(self, tp, fp, fn, tn):
        if tp + fp + fn + tn == 0:
            tn = 1
        m = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
        assert all(0.0 <= v <= 1.0 for v in m.as_dict().values())
        assert m.iou <= m.dice
        assert abs(m.dice - 2 * m.iou / (1 + m.iou)) <= 1e-12
