"""Accuracy, F1, midrank AUC, and transfer-gain arithmetic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstl.errors import ContractError, UndefinedMetricError
from mstl.metrics import (
    EvalResult,
    accuracy,
    auc,
    evaluate_binary,
    f1,
    transfer_gain,
)


def auc_pairwise_oracle(scores, labels):
    """O(n^2) comparison count with half credit for ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


class TestAccuracy:
    def test_all_correct_all_wrong(self):
        assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert accuracy([1, 0, 1], [0, 1, 0]) == 0.0

    def test_three_of_four(self):
        assert accuracy([1, 1, 0, 0], [1, 1, 0, 1]) == 0.75

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 2, 100)
        labels = rng.integers(0, 2, 100)
        expect = sum(int(p == l) for p, l in zip(preds, labels)) / 100
        assert accuracy(preds, labels) == expect

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            accuracy([1], [1, 0])


class TestF1:
    def test_perfect(self):
        assert f1([1, 0, 1], [1, 0, 1]) == 1.0

    def test_closed_form_half(self):
        # TP=1, FP=1, FN=1 -> F1 = 2/(2+1+1) = 0.5
        assert f1([1, 1, 0], [1, 0, 1]) == 0.5

    def test_no_positive_predictions_convention(self):
        assert f1([0, 0, 0], [1, 1, 0]) == 0.0

    def test_non_binary_rejected(self):
        with pytest.raises(ContractError):
            f1([0, 1, 2], [0, 1, 2])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 2, 50)
        labels = rng.integers(0, 2, 50)
        perm = rng.permutation(50)
        assert f1(preds, labels) == f1(preds[perm], labels[perm])
        assert accuracy(preds, labels) == accuracy(preds[perm], labels[perm])


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
        assert auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0

    def test_all_tied_is_half(self):
        assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_pairwise_oracle_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = 100
            labels = rng.integers(0, 2, n)
            if labels.sum() in (0, n):
                continue
            scores = np.round(rng.random(n), 2)  # induce ties
            got = auc(scores, labels)
            expect = auc_pairwise_oracle(scores.tolist(), labels.tolist())
            assert abs(got - expect) < 1e-12

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.9], [1, 1])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 30)
        if labels.sum() in (0, 30):
            labels[0] = 1 - labels[0]
        scores = rng.random(30)
        transformed = np.exp(3.0 * scores) + 1.0  # strictly increasing
        assert auc(scores, labels) == auc(transformed, labels)


class TestTransferGain:
    def r(self, acc, f1v=0.5, aucv=0.5):
        return EvalResult(accuracy=acc, f1=f1v, auc=aucv, tp=1, fp=1, tn=1, fn=1)

    def test_published_improvements(self):
        # 84.7 -> 93.9 gives 9.2; 83.7 -> 88.2 gives 4.5 (percent scale)
        report = transfer_gain(self.r(84.7), self.r(93.9))
        assert abs(report.improvements["accuracy"] - 9.2) <= 1e-12
        report = transfer_gain(self.r(83.7), self.r(88.2))
        assert abs(report.improvements["accuracy"] - 4.5) <= 1e-12

    def test_identical_results_zero_gain(self):
        a = self.r(0.88, 0.87, 0.9)
        report = transfer_gain(a, a)
        assert all(v == 0.0 for v in report.improvements.values())

    def test_report_fields(self):
        report = transfer_gain(self.r(0.8), self.r(0.9))
        d = report.to_dict()
        assert set(d) == {"no_pretrain", "pretrained", "improvements"}
        assert set(d["improvements"]) == {"accuracy", "f1", "auc"}


class TestEvaluateBinary:
    def test_counts_add_up(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, 40)
        labels[0], labels[1] = 0, 1
        preds = rng.integers(0, 2, 40)
        scores = rng.random(40)
        res = evaluate_binary(preds, labels, scores)
        assert res.tp + res.fp + res.tn + res.fn == 40
        assert res.accuracy == (res.tp + res.tn) / 40

    def test_json_roundtrip(self, tmp_path):
        from mstl.metrics import read_eval_report, write_eval_report
        res = EvalResult(accuracy=0.875, f1=0.8461538461, auc=0.93, tp=7, fp=1, tn=7, fn=1)
        path = tmp_path / "eval.json"
        write_eval_report(path, res)
        back = read_eval_report(path)
        assert back.tp == 7 and back.fn == 1
        assert abs(back.f1 - round(res.f1, 6)) < 1e-12
