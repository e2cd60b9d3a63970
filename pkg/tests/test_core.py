import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sced.core import (ConstantColumn, Dataset, DegenerateScatter, EllipticalParams, EmptyCluster,
                       FitConfig, NotSPD, Partition, TransformSpec, scatter_from_variance,
                       standardize, validate_params)


def random_spd(rng, p):
    a = rng.standard_normal((p, p))
    return a @ a.T + 0.1 * np.eye(p)


# ---------------------------------------------------------------------------
# standardize
# ---------------------------------------------------------------------------

def test_standardize_single_column():
    d = standardize(Dataset(np.array([[1.0], [2.0], [3.0]])))
    assert d.standardized
    np.testing.assert_allclose(d.values.mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(d.values.var(ddof=1), 1.0, atol=1e-12)


def test_standardize_idempotent():
    rng = np.random.default_rng(0)
    once = standardize(Dataset(rng.standard_normal((40, 3)) * 5 + 2))
    twice = standardize(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-10)


def test_standardize_round_trip():
    rng = np.random.default_rng(1)
    x = np.column_stack([5 + 2 * rng.standard_normal(50), -3 + 4 * rng.standard_normal(50)])
    d = standardize(Dataset(x))
    np.testing.assert_allclose(d.to_original(), x, atol=1e-12)
    # composition survives a second pass
    np.testing.assert_allclose(standardize(d).to_original(), x, atol=1e-12)


def test_standardize_constant_column():
    x = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    with pytest.raises(ConstantColumn) as info:
        standardize(Dataset(x))
    assert info.value.column == 1


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0, 2.0]]))


def test_dataset_is_read_only():
    d = Dataset(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        d.values[0, 0] = 1.0


# ---------------------------------------------------------------------------
# Partition
# ---------------------------------------------------------------------------

def test_partition_sizes_and_properness():
    p = Partition(np.array([1, 1, 3]), 3)
    np.testing.assert_array_equal(p.sizes(), [2, 0, 1])
    assert not p.is_proper
    assert p.n_nonempty() == 2
    assert Partition(np.array([2, 1]), 2).is_proper


def test_partition_label_range():
    with pytest.raises(ValueError):
        Partition(np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Partition(np.array([1, 3]), 2)


def test_partition_relabel():
    p = Partition(np.array([1, 2, 2]), 2)
    np.testing.assert_array_equal(p.relabel([2, 1]).labels, [2, 1, 1])


# ---------------------------------------------------------------------------
# scatter_from_variance / validate_params
# ---------------------------------------------------------------------------

def test_scatter_identity():
    s, s2 = scatter_from_variance(np.eye(3))
    np.testing.assert_array_equal(s, np.eye(3))
    assert s2 == 1.0


def test_scatter_diagonal():
    s, s2 = scatter_from_variance(np.diag([4.0, 8.0]))
    np.testing.assert_allclose(s, np.diag([1.0, 2.0]))
    assert s2 == 4.0


def test_scatter_simulation_matrix():
    sx = 0.175 * np.eye(2) + 0.075 * np.ones((2, 2))
    np.testing.assert_allclose(sx, [[0.25, 0.075], [0.075, 0.25]])
    s, s2 = scatter_from_variance(sx)
    np.testing.assert_allclose(s, [[1.0, 0.3], [0.3, 1.0]], atol=1e-15)
    assert s2 == pytest.approx(0.25)


def test_scatter_not_spd():
    with pytest.raises(NotSPD):
        scatter_from_variance(np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.integers(1, 6), a=st.floats(1e-3, 1e3))
def test_scatter_idempotent_and_scale_invariant(seed, p, a):
    sx = random_spd(np.random.default_rng(seed), p)
    s1, _ = scatter_from_variance(sx)
    s2, _ = scatter_from_variance(s1)
    s3, _ = scatter_from_variance(a * sx)
    np.testing.assert_allclose(s2, s1, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(s3, s1, rtol=1e-9, atol=1e-12)


def test_validate_identity_on_valid():
    prm = EllipticalParams(np.zeros((2, 2)), np.array([[1.0, 0.2], [0.2, 2.0]]), np.array([0.3, 0.7]))
    out = validate_params(prm)
    np.testing.assert_array_equal(out.scatter, prm.scatter)
    np.testing.assert_allclose(out.probs, prm.probs, atol=1e-15)


def test_validate_renormalizes_scatter():
    prm = EllipticalParams(np.zeros((1, 2)), np.array([[2.0, 0.4], [0.4, 4.0]]), np.array([1.0]))
    out = validate_params(prm)
    np.testing.assert_allclose(out.scatter, [[1.0, 0.2], [0.2, 2.0]])


def test_validate_renormalizes_probs():
    prm = EllipticalParams(np.zeros((2, 1)), np.eye(1), np.array([0.5, 0.5000001]))
    assert abs(validate_params(prm).probs.sum() - 1.0) < 1e-12


def test_validate_errors():
    with pytest.raises(EmptyCluster):
        validate_params(EllipticalParams(np.zeros((2, 1)), np.eye(1), np.array([1.0, 0.0])))
    with pytest.raises(DegenerateScatter):
        validate_params(EllipticalParams(np.zeros((1, 2)), np.ones((2, 2)), np.array([1.0])))


def test_validate_symmetrizes():
    s = np.array([[1.0, 0.3], [0.1, 1.0]])
    out = validate_params(EllipticalParams(np.zeros((1, 2)), s, np.array([1.0])))
    np.testing.assert_allclose(out.scatter, [[1.0, 0.2], [0.2, 1.0]])


# ---------------------------------------------------------------------------
# TransformSpec
# ---------------------------------------------------------------------------

def test_transform_zero_and_p2_identity():
    tr = TransformSpec(1.0, 2)
    assert tr.forward(0.0) == 0.0
    np.testing.assert_allclose(tr.forward(np.array([0.5, 3.0, 40.0])), [0.5, 3.0, 40.0], rtol=1e-14)


@pytest.mark.parametrize("d0", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("p", [2, 6, 10])
def test_transform_round_trip(d0, p):
    tr = TransformSpec(d0, p)
    t = np.logspace(-6, 6, 400)
    np.testing.assert_allclose(tr.inverse(tr.forward(t)), t, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(tr.forward(tr.inverse(t)), t, rtol=1e-10, atol=1e-10)
    assert np.all(np.diff(tr.forward(t)) > 0)


@pytest.mark.parametrize("d0", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("p", [2, 6, 10])
def test_inverse_derivative_matches_finite_differences(d0, p):
    tr = TransformSpec(d0, p)
    y = np.logspace(-6, 6, 200)[1:-1]
    step = 1e-5 * y
    fd = (tr.inverse(y + step) - tr.inverse(y - step)) / (2 * step)
    np.testing.assert_allclose(tr.inverse_derivative(y), fd, rtol=1e-5)


def test_log_weight_core_identity():
    tr = TransformSpec(1.5, 6)
    y = np.logspace(-4, 3, 50)
    lhs = (1 - 3) * np.log(tr.inverse(y)) - np.log(tr.inverse_derivative(y))
    np.testing.assert_allclose(tr.log_weight_core(y), lhs, rtol=1e-9, atol=1e-9)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(k_range=(3, 2))
    with pytest.raises(ValueError):
        FitConfig(admm_tol=0)
    with pytest.raises(ValueError):
        FitConfig(objective="pl3")
    assert list(FitConfig(k_range=(1, 3)).ks) == [1, 2, 3]


def test_equivalent_ignores_label_names():
    a = Partition.from_zero_based(np.array([0, 0, 1, 2, 1]), 3)
    b = Partition.from_zero_based(np.array([2, 2, 0, 1, 0]), 3)
    c = Partition.from_zero_based(np.array([0, 1, 1, 2, 1]), 3)
    assert a.equivalent(b) and b.equivalent(a)
    assert not a.same_as(b)
    assert not a.equivalent(c)
