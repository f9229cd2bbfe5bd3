import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simmil.errors import ContractError
from simmil.metrics import Report, UndefinedMetric, accuracy, c_index, roc_auc, roc_auc_multiclass


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def cindex_oracle(risks, times, censored):
    num = den = 0.0
    for i in range(len(times)):
        for j in range(len(times)):
            if times[i] < times[j] and not censored[i]:
                den += 1
                num += 1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0
    return num / den


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert accuracy([1, 0, 1], [1, 1, 1]) == pytest.approx(2 / 3)

    def test_mismatch(self):
        with pytest.raises(ContractError):
            accuracy([1, 0], [1])


class TestAUC:
    def test_worked_example(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_separated_and_ties(self):
        assert roc_auc([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0
        assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetric):
            roc_auc([0.1, 0.2], [1, 1])

    def test_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            s = rng.integers(0, 6, n).astype(float)
            y = rng.integers(0, 2, n)
            y[:2] = (0, 1)
            assert roc_auc(s, y) == auc_oracle(s, y)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.booleans()), min_size=2, max_size=40))
    def test_complement_and_monotone_transform(self, rows):
        s = np.array([r[0] for r in rows])
        y = np.array([r[1] for r in rows])
        if y.all() or not y.any() or len(np.unique(s)) < len(s):
            return
        assert roc_auc(s, y) + roc_auc(-s, y) == pytest.approx(1.0)
        ranks = np.argsort(np.argsort(s)) * 10.0 - 3.0
        assert roc_auc(ranks, y) == roc_auc(s, y)

    def test_multiclass_macro(self):
        probs = np.eye(3)[[0, 1, 2, 0]] * 0.9 + 0.05
        assert roc_auc_multiclass(probs, [0, 1, 2, 0]) == 1.0


class TestCIndex:
    def test_worked_example(self):
        assert c_index([3, 2, 1], [2, 4, 6], [False, False, True]) == 1.0

    def test_all_ties(self):
        assert c_index([1, 1, 1], [1, 2, 3], [False, False, False]) == 0.5

    def test_no_pairs(self):
        with pytest.raises(UndefinedMetric):
            c_index([1, 2], [1, 2], [True, True])

    def test_reversal_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            r = rng.permutation(20).astype(float)
            t = rng.permutation(20).astype(float) + 1
            c = rng.random(20) < 0.3
            c[0] = False
            t[0] = 0.5
            assert c_index(-r, t, c) == pytest.approx(1 - c_index(r, t, c))

    def test_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 40))
            r = rng.integers(0, 4, n).astype(float)
            t = rng.integers(1, 6, n).astype(float)
            c = rng.random(n) < 0.3
            t[:2], c[:2] = (1.0, 2.0), (False, False)
            assert c_index(r, t, c) == cindex_oracle(r, t, c)

    def test_monotone_transform(self):
        r = np.array([0.1, 2.0, -3.0, 4.0])
        t, c = [1, 2, 3, 4], [False] * 4
        assert c_index(np.exp(r), t, c) == c_index(r, t, c)


class TestReport:
    def test_single_run_std_zero(self):
        assert Report.summarize([0.7]) == (0.7, 0.0)

    def test_sample_std(self):
        mean, std = Report.summarize([1, 2, 3])
        assert (mean, std) == (2.0, 1.0)

    def test_add_seed_and_round_trip(self):
        rep = Report("classification")
        rep.add_seed(1, {"auc": 0.8, "acc": 0.7})
        rep.add_seed(2, {"auc": 0.9, "acc": 0.7})
        assert rep.value("auc") == pytest.approx(0.85)
        assert min(0.8, 0.9) <= rep.value("auc") <= max(0.8, 0.9)
        back = Report.from_json(rep.to_json())
        assert back.to_json() == rep.to_json()
        assert json.loads(rep.to_json())["metrics"]["acc"]["n"] == 2

    def test_csv(self):
        rep = Report("survival")
        rep.add_seed(0, {"c_index": 0.75})
        assert rep.to_csv("r1") == "run_id,task,metric,value\nr1,survival,c_index,0.75\n"
