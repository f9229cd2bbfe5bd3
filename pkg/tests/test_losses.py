import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simmil.errors import ContractError
from simmil.losses import (
    EmptyPairsWarning,
    LossConfig,
    assign_bins,
    ce_loss,
    nt_xent,
    ranking_loss,
    sce_loss,
    survival_nll,
    survival_risk,
    time_bins,
)
from simmil.numeric import Tensor, check_gradients


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def logits_for(p):
    return t64(np.log(np.asarray(p, dtype=np.float64)))


class TestCE:
    def test_uniform_four_classes(self):
        assert float(ce_loss(t64(np.zeros((1, 4))), [2]).data) == pytest.approx(math.log(4))

    def test_confident_correct(self):
        assert float(ce_loss(t64([[60.0, 0.0]]), [0]).data) == pytest.approx(0.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            z = rng.normal(size=(6, 5)) * 3
            y = rng.integers(0, 5, 6)
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            want = -np.log(p[np.arange(6), y]).mean()
            assert float(ce_loss(t64(z), y).data) == pytest.approx(want, abs=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(ContractError):
            ce_loss(t64(np.zeros((1, 3))), [3])


class TestSCE:
    def test_worked_example(self):
        val = float(sce_loss(logits_for([[0.7, 0.3]]), [0], 1.0, 1.0, -4.0).data)
        assert val == pytest.approx(-math.log(0.7) + 1.2, abs=1e-9)

    def test_one_hot_correct_is_zero(self):
        val = float(sce_loss(t64([[0.0, -800.0, -800.0]]), [0]).data)
        assert val == 0.0

    def test_alpha_zero_is_ce(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = t64(rng.normal(size=(4, 3)) * 4)
            y = rng.integers(0, 3, 4)
            assert abs(float(sce_loss(z, y, alpha=0.0).data) - float(ce_loss(z, y).data)) <= 1e-12

    def test_alpha_weights_reverse_term(self):
        z = logits_for([[0.6, 0.4]])
        ce = -math.log(0.6)
        assert float(sce_loss(z, [0], alpha=2.0, beta=0.5).data) == pytest.approx(0.5 * ce + 2.0 * 0.4 * 4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
    def test_non_negative(self, row, data):
        y = data.draw(st.integers(0, len(row) - 1))
        assert float(sce_loss(t64([row]), [y]).data) >= 0.0


class TestRanking:
    def test_equal_scores(self):
        s = t64([0.3, -1.0, 5.0])
        assert float(ranking_loss(s, s).data) == -0.5

    def test_single_pair(self):
        val = float(ranking_loss(t64([2.0]), t64([0.0])).data)
        assert val == pytest.approx(-1 / (1 + math.exp(-2)), abs=1e-12)

    def test_monotone_in_margin(self):
        grid = np.linspace(-5, 5, 41)
        vals = [float(ranking_loss(t64([g]), t64([0.0])).data) for g in grid]
        assert all(b < a for a, b in zip(vals, vals[1:]))
        assert all(-1.0 <= v <= 0.0 for v in vals)

    def test_empty_pairs_warns(self):
        with pytest.warns(EmptyPairsWarning):
            out = ranking_loss(t64(np.zeros(0)), t64(np.zeros(0)))
        assert float(out.data) == 0.0


def nll_oracle(logits, idx, cens):
    h = 1 / (1 + np.exp(-logits))
    total = 0.0
    for row, j, c in zip(h, idx, cens):
        surv = np.prod(1 - row[:j + 1]) if c else row[j] * np.prod(1 - row[:j])
        total -= math.log(surv)
    return total / len(idx)


class TestSurvivalNLL:
    def test_single_bin_certain_event(self):
        assert float(survival_nll(t64([[40.0]]), [0], [False]).data) == pytest.approx(0.0, abs=1e-12)

    def test_censored_zero_hazard(self):
        assert float(survival_nll(t64([[-60.0, -60.0, -60.0]]), [2], [True]).data) == pytest.approx(0.0, abs=1e-12)

    def test_product_form_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            z = rng.normal(size=(5, 4)) * 2
            idx = rng.integers(0, 4, 5)
            cens = rng.random(5) < 0.4
            assert float(survival_nll(t64(z), idx, cens).data) == pytest.approx(nll_oracle(z, idx, cens), abs=1e-6)

    def test_bin_out_of_range(self):
        with pytest.raises(ContractError):
            survival_nll(t64(np.zeros((1, 4))), [4], [False])

    def test_risk_increases_with_hazard(self):
        low, high = survival_risk(np.full((1, 4), -2.0)), survival_risk(np.full((1, 4), 2.0))
        assert high[0] > low[0]

    def test_bins(self):
        cuts = time_bins(np.arange(1, 9, dtype=float), np.zeros(8, dtype=bool), 4)
        assert list(assign_bins([1.0, 3.0, 8.0], cuts)) == [0, 1, 3]


class TestNTXent:
    def test_closed_form(self):
        z = t64([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        # positives identical (sim 1), negatives orthogonal (sim 0)
        assert float(nt_xent(z, 1.0).data) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-9)

    def test_scale_invariant(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 4))
        scale = rng.uniform(0.1, 10, size=(6, 1))
        assert float(nt_xent(t64(z)).data) == pytest.approx(float(nt_xent(t64(z * scale)).data), abs=1e-9)

    def test_needs_two_pairs(self):
        with pytest.raises(ContractError):
            nt_xent(t64(np.ones((2, 3))))

    def test_gradient(self):
        z = t64(np.random.default_rng(4).normal(size=(6, 3)), grad=True)
        assert check_gradients(lambda: nt_xent(z, 0.5), [z]) < 1e-3


@pytest.mark.parametrize("kwargs", [dict(kind="hinge"), dict(alpha=-1.0), dict(A=0.0),
                                    dict(temperature=0.0), dict(bins=1)])
def test_config_validation(kwargs):
    with pytest.raises(ContractError):
        LossConfig(**kwargs)


def test_ranking_warning_not_raised_with_pairs():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ranking_loss(t64([1.0]), t64([0.0]))
