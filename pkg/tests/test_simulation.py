import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import quad

from sced.core import LengthMismatch, Partition, scatter_from_variance
from sced.simulation import (M1_RMAX, InvalidDesign, SimDesign, align_means, format_table,
                             generate_dataset, rand_index, radial_second_moment, replication_seeds,
                             rse, run_grid, sample_radial, summarize, variance_rse)


# ---------------------------------------------------------------------------
# Designs and radial draws
# ---------------------------------------------------------------------------

def test_design_parameters():
    d2 = SimDesign(4, 2, 100, 1.2)
    np.testing.assert_allclose(d2.probs, [0.6, 0.4])
    np.testing.assert_allclose(d2.means, [[0, 0, 0, 0], [1.5, 0, 1.5, 0]])
    np.testing.assert_allclose(d2.sigma_x, 1.44 * (0.175 * np.eye(4) + 0.075))
    assert np.linalg.eigvalsh(d2.sigma_x).min() > 0
    d3 = SimDesign(3, 3, 100, 1.0)
    np.testing.assert_allclose(d3.probs, [0.4, 0.3, 0.3])
    np.testing.assert_allclose(d3.means, [[0, 0, 0], [1.5, 1.5, 1.5], [1.5, 0, 1.5]])
    with pytest.raises(InvalidDesign):
        SimDesign(2, 4, 100, 1.0)
    with pytest.raises(InvalidDesign):
        SimDesign(2, 2, 100, 1.0, "m3")
    with pytest.raises(InvalidDesign):
        SimDesign(2, 2, 100, -1.0)


def test_m1_support():
    assert M1_RMAX == pytest.approx(3 * math.sqrt(5) / 2)
    assert M1_RMAX == pytest.approx(3.3541, abs=1e-4)
    r = sample_radial("m1", 6, np.random.default_rng(0), size=100_000)
    assert r.min() >= 0 and r.max() <= M1_RMAX


def test_m2_half_normal_mean():
    r = sample_radial("m2", 1, np.random.default_rng(1), size=100_000)
    assert r.mean() == pytest.approx(math.sqrt(2 / math.pi), abs=0.01)


def test_m1_second_moment_matches_quadrature():
    p = 6
    dens = lambda r: r ** (p - 1) * r ** 10 * (45 / 4 - r * r) ** 0.25
    oracle = quad(lambda r: r * r * dens(r), 0, M1_RMAX)[0] / quad(dens, 0, M1_RMAX)[0]
    assert radial_second_moment("m1", p) == pytest.approx(oracle, rel=1e-8)
    r = sample_radial("m1", p, np.random.default_rng(2), size=100_000)
    assert np.mean(r * r) == pytest.approx(oracle, rel=0.01)


def test_m2_within_cluster_covariance():
    design = SimDesign(4, 2, 12_500, 1.4, "m2")
    data, truth, _ = generate_dataset(design, np.random.default_rng(3))
    x = data.values
    for c in range(2):
        xc = x[truth.index == c]
        assert xc.shape[0] >= 5000
        err = np.linalg.norm(np.cov(xc.T) - design.sigma_x) / np.linalg.norm(design.sigma_x)
        assert err < 0.05


def test_m1_within_cluster_covariance():
    design = SimDesign(3, 2, 12_500, 1.0, "m1")
    data, truth, _ = generate_dataset(design, np.random.default_rng(4))
    xc = data.values[truth.index == 0]
    err = np.linalg.norm(np.cov(xc.T) - design.sigma_x) / np.linalg.norm(design.sigma_x)
    assert err < 0.05


def test_cluster_frequencies():
    for k in (2, 3):
        design = SimDesign(2, k, 10_000, 1.0, "m2")
        _, truth, _ = generate_dataset(design, np.random.default_rng(5))
        freq = np.bincount(truth.index, minlength=k) / 10_000
        np.testing.assert_allclose(freq, design.probs, atol=0.02)


def test_m2_quadratic_form_is_chi_square():
    design = SimDesign(3, 2, 10_000, 1.0, "m2")
    data, truth, _ = generate_dataset(design, np.random.default_rng(6))
    r = data.values - design.means[truth.index]
    q = np.einsum("ij,jk,ik->i", r, np.linalg.inv(design.sigma_x), r)
    assert stats.kstest(q, stats.chi2(3).cdf).statistic < 0.02


def test_truth_scatter_normalized():
    design = SimDesign(5, 3, 50, 1.6, "m1")
    _, _, params = generate_dataset(design, np.random.default_rng(0))
    scatter, _ = scatter_from_variance(design.sigma_x)
    np.testing.assert_allclose(params.scatter, scatter)
    assert params.scatter[0, 0] == 1.0


def test_sigma_zero_limit():
    design = SimDesign(3, 2, 100, 0.0, "m1")
    data, truth, _ = generate_dataset(design, np.random.default_rng(7))
    np.testing.assert_array_equal(data.values, design.means[truth.index])


def test_generate_bit_reproducible():
    design = SimDesign(6, 3, 300, 1.4, "m1")
    a = generate_dataset(design, np.random.default_rng(11))
    b = generate_dataset(design, np.random.default_rng(11))
    assert a[0].values.tobytes() == b[0].values.tobytes()
    np.testing.assert_array_equal(a[1].labels, b[1].labels)


def test_replication_seeds_distinct():
    design = SimDesign(2, 2, 10, 1.0)
    seeds = {replication_seeds(design, r)[1] for r in range(50)}
    assert len(seeds) == 50


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_rand_index_examples():
    a = Partition(np.array([1, 1, 2]), 2)
    assert rand_index(a, a) == 1.0
    assert rand_index(a, Partition(np.array([1, 2, 2]), 2)) == pytest.approx(1 / 3)
    assert rand_index(a, a.relabel(np.array([2, 1]))) == 1.0
    with pytest.raises(LengthMismatch):
        rand_index(a, Partition(np.array([1, 2]), 2))


def _rand_pairs(a, b):
    n = len(a)
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in itertools.combinations(range(n), 2))
    return agree / math.comb(n, 2)


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.integers(1, 3), min_size=2, max_size=12), seed=st.integers(0, 1000))
def test_rand_index_properties(a, seed):
    rng = np.random.default_rng(seed)
    la = np.array(a)
    lb = rng.integers(1, 4, size=la.size)
    assert rand_index(la, lb) == pytest.approx(_rand_pairs(la, lb))
    assert rand_index(la, lb) == pytest.approx(rand_index(lb, la))
    perm = rng.permutation(3) + 1
    assert rand_index(perm[la - 1], lb) == pytest.approx(rand_index(la, lb))
    same = all((la[i] == la[j]) == (lb[i] == lb[j]) for i, j in itertools.combinations(range(la.size), 2))
    assert (rand_index(la, lb) == 1.0) == same


def test_rse_examples():
    assert rse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rse([1.0, 1.0], [0.0, 0.0]) == pytest.approx(1.0)
    e = np.array([0.3, -0.2, 0.1])
    assert rse(2 * e, np.zeros(3)) == pytest.approx(2 * rse(e, np.zeros(3)))
    with pytest.raises(LengthMismatch):
        rse([1.0], [1.0, 2.0])


def test_variance_rse_upper_triangle():
    truth = np.eye(2)
    est = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert variance_rse(est, truth) == pytest.approx(math.sqrt(0.09 / 3))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_hungarian_alignment_exhaustive(k):
    rng = np.random.default_rng(k)
    for _ in range(50):
        truth = rng.standard_normal((k, 3))
        est = truth[rng.permutation(k)] + 0.8 * rng.standard_normal((k, 3))
        order = align_means(est, truth)
        best = min(rse(est[list(perm)], truth) for perm in itertools.permutations(range(k)))
        assert rse(est[order], truth) <= best + 1e-12


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------

def test_run_grid_kmeans_on_sigma_zero(tmp_path):
    design = SimDesign(2, 2, 40, 0.0, replications=3)
    summary = run_grid([design], methods=("kmeans",), out_dir=tmp_path)
    assert summary[0]["ri"] == 100.0
    rows = (tmp_path / "results.csv").read_text().splitlines()
    assert len(rows) == 4
    assert "100.00" in format_table(summary)


def test_run_grid_resume_and_determinism(tmp_path):
    design = SimDesign(2, 2, 60, 1.0, replications=2, seed=3)
    methods = ("kmeans", "IS", "SP")
    first = run_grid([design], methods=methods, out_dir=tmp_path / "a")
    csv_a = (tmp_path / "a" / "results.csv").read_text()
    # a second run resumes every replication from checkpoints
    ckpts = sorted((tmp_path / "a" / "checkpoints").iterdir())
    assert len(ckpts) == 2
    stamp = [p.stat().st_mtime_ns for p in ckpts]
    again = run_grid([design], methods=methods, out_dir=tmp_path / "a")
    assert [p.stat().st_mtime_ns for p in ckpts] == stamp
    assert (tmp_path / "a" / "results.csv").read_text() == csv_a
    assert again == first
    # a fresh directory reproduces the same numbers
    fresh = run_grid([design], methods=methods, out_dir=tmp_path / "b")
    assert fresh == first
    # deleting one checkpoint recomputes only that replication, identically
    ckpts[1].unlink()
    resumed = run_grid([design], methods=methods, out_dir=tmp_path / "a")
    assert resumed == first
    assert (tmp_path / "a" / "results.csv").read_text() == csv_a


def test_run_grid_rejects_unknown_method():
    with pytest.raises(ValueError):
        run_grid([SimDesign(2, 2, 20, 1.0, replications=1)], methods=("magic",))


def test_summarize_counts_failures():
    rows = [dict(design="d", method="IS", objective="pl1", rep=0, ri=1.0, rse_mean=0.1, rse_var=0.2,
                 error=""),
            dict(design="d", method="IS", objective="pl1", rep=1, ri=0.5, rse_mean=0.3, rse_var=0.4,
                 error=""),
            dict(design="d", method="IS", objective="pl1", rep=2, ri=None, rse_mean=None, rse_var=None,
                 error="boom")]
    (cell,) = summarize(rows)
    assert cell["replications"] == 3 and cell["failures"] == 1
    assert cell["ri"] == pytest.approx(75.0)
    assert cell["ri_se"] == pytest.approx(np.std([100, 50], ddof=1) / math.sqrt(2))
    assert cell["k_hat"] is None


def test_checkpoint_json_is_plain(tmp_path):
    design = SimDesign(2, 2, 30, 0.0, replications=1)
    run_grid([design], methods=("kmeans",), out_dir=tmp_path)
    (ckpt,) = (tmp_path / "checkpoints").iterdir()
    rows = json.loads(ckpt.read_text())
    assert rows[0]["method"] == "kmeans" and rows[0]["ri"] == 1.0
