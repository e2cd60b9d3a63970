import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sced.core import EllipticalParams, Partition, TransformSpec
from sced.density import cv_bandwidth, quadratic_forms
from sced.likelihood import loo_marginal_loglik
from sced.selection import SpicCurve, adequacy_D, normal_mixture_loglik, select_k, spic
from sced.simulation import SimDesign, generate_dataset

# customer data: n = 4062, p = 6; criterion values for k = 1..6
CUSTOMER_SPIC = [7.913, 7.898, 7.865, 7.895, 7.890, 7.910]


def penalty(k, n, p):
    return k * math.log(n) / (2 * n ** 0.8) + k * (p + 1) * math.log(n) / (2 * n)


def test_spic_formula_at_e():
    p = 3
    assert spic(1, 0.0, math.e, p) == pytest.approx(1 / (2 * math.e ** 0.8) + (p + 1) / (2 * math.e))


def test_spic_linear_in_k():
    n, p, loo = 500, 4, -1234.5
    for k in (1, 2, 3, 5):
        diff = spic(2 * k, loo, n, p) - spic(k, loo, n, p)
        assert diff == pytest.approx(k * math.log(n) / (2 * n ** 0.8) + k * (p + 1) * math.log(n) / (2 * n),
                                     rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(3, 10**6), p=st.integers(1, 20), k=st.integers(1, 20),
       loo=st.floats(-1e6, 1e6))
def test_spic_strictly_increasing_in_k(n, p, k, loo):
    assert spic(k + 1, loo, n, p) > spic(k, loo, n, p)


def test_customer_table_reselection():
    n, p = 4062, 6
    loo = {k: -n * (v - penalty(k, n, p)) for k, v in enumerate(CUSTOMER_SPIC, start=1)}
    curve = select_k(n, p, range(1, 7), lambda k: loo[k])
    np.testing.assert_allclose(curve.values, CUSTOMER_SPIC, rtol=1e-12)
    assert curve.selected == 3
    assert min(curve.values) == pytest.approx(7.865)


def test_select_k_single():
    curve = select_k(100, 2, [1], lambda k: -50.0)
    assert curve.selected == 1
    assert curve.rows() == [(1, -50.0, spic(1, -50.0, 100, 2))]


def test_select_k_ties_to_smallest():
    curve = SpicCurve(ks=[1, 2, 3], loo_loglik=[0, 0, 0], values=[1.0, 0.5, 0.5])
    assert curve.selected == 2
    assert SpicCurve().selected is None


def test_select_k_records_failures(caplog):
    def loo(k):
        if k == 2:
            raise RuntimeError("boom")
        if k == 4:
            return float("nan")
        return -100.0 * k

    curve = select_k(200, 2, [1, 2, 3, 4], loo)
    assert curve.ks == [1, 3]
    assert set(curve.failures) == {2, 4}
    assert "boom" in curve.failures[2]
    assert any("k=2" in r.message for r in caplog.records)
    assert curve.selected in (1, 3)


def test_adequacy_examples():
    n = 1000
    assert adequacy_D(-500.0, -500.0, n) == pytest.approx(-math.log(n) / n ** 0.8)
    assert adequacy_D(-500.0, -500.0, n) < 0
    d = adequacy_D(-400.0, -500.0, n)
    assert d == pytest.approx(0.1 - math.log(n) / n ** 0.8)


def test_customer_adequacy_sign():
    # D = 0.021 > 0 means pl exceeds l0 by (0.021 + log n / n^{4/5}) n
    n = 4062
    gap = (0.021 + math.log(n) / n ** 0.8) * n
    assert adequacy_D(gap, 0.0, n) == pytest.approx(0.021)
    assert adequacy_D(gap, 0.0, n) > 0


def test_normal_mixture_loglik_single_component():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
    r = x - x.mean(0)
    s = r.T @ r / x.shape[0]
    closed = -0.5 * x.shape[0] * (2 * math.log(2 * math.pi) + math.log(np.linalg.det(s)) + 2)
    assert normal_mixture_loglik(x, 1) == pytest.approx(closed, rel=1e-8)


def _duplicate_split_loo(seed, n=1000):
    """LOO log-likelihood at k* = 2 and at k = 3 where cluster 1 is split in two identical copies."""
    design = SimDesign(2, 2, n, 1.0, "m2")
    data, truth, params = generate_dataset(design, np.random.default_rng(seed))
    x = data.values
    tr = TransformSpec(1.0, 2)
    q = quadratic_forms(x, params.means, params.scatter)[np.arange(n), truth.index]
    h = cv_bandwidth(tr.forward(q)).h_tilde
    loo2 = loo_marginal_loglik(params.with_(probs=np.bincount(truth.labels)[1:] / n), x, truth, h, tr)
    rng = np.random.default_rng(seed + 1)
    labels = truth.labels.copy()
    in_one = np.flatnonzero(labels == 1)
    labels[in_one[rng.random(in_one.size) < 0.5]] = 3
    split = Partition(labels, 3)
    probs = np.bincount(labels, minlength=4)[1:] / n
    prm3 = EllipticalParams(np.r_[params.means, params.means[:1]], params.scatter, probs)
    loo3 = loo_marginal_loglik(prm3, x, split, h, tr)
    return loo2, loo3


@pytest.mark.slow
def test_spic_prefers_true_k_over_duplicated_component():
    wins = 0
    for seed in range(100):
        loo2, loo3 = _duplicate_split_loo(seed)
        wins += spic(2, loo2, 1000, 2) < spic(3, loo3, 1000, 2)
    assert wins >= 90
