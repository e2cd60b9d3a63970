"""End-to-end fit: initialization, separation penalty, pseudo-likelihood, refinement.

:func:`fit_once` runs every stage for a fixed number of clusters and
records each stage's partition and parameters in a :class:`FitReport`.
:func:`fit_range` repeats it over a range of cluster counts and picks
one by the information criterion.

A stage that fails hands the previous stage's output forward and the
report is flagged ``degraded``; a benchmark sweep never aborts on one bad
replication.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .clustering import posteriors, refine_loop, refine_partition
from .core import (Dataset, EllipticalParams, FitConfig, Partition, SCEDError,
                   scatter_from_variance, validate_params)
from .density import GeneratorEstimate, cv_bandwidth, quadratic_forms, variance_from_scatter
from .initialization import InitEntry, SingularPooledVariance, init_refine, initialize, kbar
from .likelihood import loo_marginal, maximize, pi_hat
from .selection import SpicCurve, select_k
from .separation import (a3_lambda_bound, admm_fit, fit_lambda_path, lambda_grid,
                         select_lambda, sp_objective, sym_sqrt, variance_estimates)

log = logging.getLogger(__name__)

STAGES = ("IS", "SP", "PL", "OC")


class StageError(SCEDError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


@dataclass
class StageResult:
    partition: Partition
    params: EllipticalParams
    variance: np.ndarray
    objective: float | None = None
    wall_time: float = 0.0


@dataclass
class FitReport:
    k: int
    n: int
    p: int
    objective: str
    seed: int
    stages: dict = field(default_factory=dict)
    bandwidths: dict = field(default_factory=dict)
    lambda_star: float | None = None
    lambda_grid: np.ndarray | None = None
    lambda_path: list = field(default_factory=list)
    loo_loglik: float | None = None
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    degraded: bool = False

    @property
    def final(self) -> StageResult:
        for name in reversed(STAGES):
            if name in self.stages:
                return self.stages[name]
        raise KeyError("report holds no stage")

    @property
    def partition(self) -> Partition:
        return self.final.partition

    @property
    def params(self) -> EllipticalParams:
        return self.final.params


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)


def _warn(report: FitReport, msg: str) -> None:
    log.warning(msg)
    report.warnings.append(msg)


def _set_loo(report: FitReport, val) -> None:
    report.loo_loglik = val.value
    report.diagnostics["loo_clamped"] = val.n_clamped
    if val.n_clamped:
        _warn(report, f"k={report.k}: {val.n_clamped} point(s) have zero leave-one-out density "
                      "and sit at the floor; the criterion value is dominated by them")


def _scatter_params(means, sigma_x, probs) -> EllipticalParams:
    scatter, _ = scatter_from_variance(0.5 * (sigma_x + sigma_x.T))
    return validate_params(EllipticalParams(means, scatter, probs))


# ---------------------------------------------------------------------------
# Separation-penalty stage
# ---------------------------------------------------------------------------

def separation_stage(x, entries: dict, k: int, config: FitConfig, report: FitReport):
    """Pick a warm start from the pool, trace the lambda path, select lambda.

    Pool members are compared by their penalized objective at the smallest
    grid level computed from the ``l = k`` initializer.
    """
    base = entries[k]
    w = np.linalg.inv(base.pooled_var)
    w = 0.5 * (w + w.T)
    w_half, _ = sym_sqrt(w)
    mu0 = base.means
    ref_lam = float(lambda_grid(base.beta, mu0, w_half, config.lambda_grid_size)[0])
    scores = {}
    for ell in sorted(entries):
        if ell < k:
            continue
        st = admm_fit(x, w, ref_lam, entries[ell].beta, mu0, tol=config.admm_tol,
                      max_iter=config.admm_max_iter, penalty=config.admm_penalty, w_half=w_half)
        scores[ell] = sp_objective(x, st.beta, st.mu, w, ref_lam)
    ell_star = min(scores, key=scores.get)
    beta0 = entries[ell_star].beta
    grid = lambda_grid(beta0, mu0, w_half, config.lambda_grid_size)
    path = fit_lambda_path(x, w, beta0, mu0, grid, tol=config.admm_tol,
                           max_iter=config.admm_max_iter, penalty=config.admm_penalty,
                           warm_start=config.warm_start)
    best = select_lambda(path, k)
    report.lambda_grid = grid
    report.lambda_star = best.lam
    report.lambda_path = [(e.lam, e.fit_ss, e.n_clusters_effective, e.converged, e.iterations)
                          for e in path.entries]
    report.diagnostics["sp_pool_scores"] = {int(a): float(b) for a, b in scores.items()}
    report.diagnostics["sp_pool_choice"] = int(ell_star)
    report.diagnostics["admm_unconverged"] = int(sum(not e.converged for e in path.entries))
    bound = a3_lambda_bound(w_half, x.shape[0])
    if best.lam < bound:
        report.diagnostics["lambda_below_a3_bound"] = True
        log.info("selected lambda %.4g is below the recovery bound %.4g", best.lam, bound)
    return best


# ---------------------------------------------------------------------------
# Single fit
# ---------------------------------------------------------------------------

def _single_cluster(x, config: FitConfig, report: FitReport) -> FitReport:
    tr = config.transform(x.shape[1])
    n = x.shape[0]
    part = Partition(np.ones(n, dtype=np.int64), 1)
    mean = x.mean(axis=0, keepdims=True)
    r = x - mean
    sx = r.T @ r / n
    t0 = time.perf_counter()
    params = _scatter_params(mean, sx, np.ones(1))
    y = tr.forward(quadratic_forms(x, params.means, params.scatter)[:, 0])
    bw = cv_bandwidth(y, config.cv_grid_size)
    res = maximize(config.objective, params, x, part, bw.h_hat, tr,
                   max_evals=config.optimizer_max_evals, method=config.optimizer)
    est = GeneratorEstimate(tr.forward(quadratic_forms(x, res.params.means, res.params.scatter)[:, 0]),
                            bw.h_hat, tr)
    report.stages["PL"] = StageResult(part, res.params, variance_from_scatter(res.params.scatter, est),
                                      res.value, time.perf_counter() - t0)
    report.bandwidths.update(h_tilde=bw.h_tilde, h_hat=bw.h_hat,
                             h_tilde_star=bw.h_tilde, h_hat_star=bw.h_hat)
    _set_loo(report, loo_marginal(res.params, x, part, bw.h_tilde, tr))
    return report


def fit_once(data, k: int, config: FitConfig | None = None, init_entries: dict | None = None,
             upto: str = "OC") -> FitReport:
    """Run every stage at ``k`` clusters.

    ``init_entries`` may carry precomputed initializer output (as from
    :func:`sced.initialization.initialize`) so a sweep over ``k`` shares it.
    ``upto`` names the last stage to run (``"IS"``, ``"SP"``, ``"PL"`` or
    ``"OC"``); the leave-one-out log-likelihood is only computed after a
    full run.
    """
    if upto not in STAGES:
        raise ValueError(f"unknown stage {upto!r}")
    config = config or FitConfig(k_range=(k, k))
    x = _values(data)
    n, p = x.shape
    report = FitReport(k=k, n=n, p=p, objective=config.objective, seed=config.seed)
    if k == 1:
        return _single_cluster(x, config, report)
    tr = config.transform(p)

    # initialization
    t0 = time.perf_counter()
    if init_entries is None:
        top = max(k, kbar(n))
        init_entries = initialize(x, k_max=top, seed=config.seed, max_iter=config.init_max_iter,
                                  restarts=config.kmeans_restarts, k_min=k)
    entries = {ell: e for ell, e in init_entries.items() if ell >= k}
    if k not in entries:
        try:
            entries[k] = init_refine(x, k, seed=config.seed, max_iter=config.init_max_iter,
                                     restarts=config.kmeans_restarts)
        except SingularPooledVariance as exc:
            if exc.last is None:
                raise StageError("IS", exc) from exc
            entries[k] = exc.last
    base: InitEntry = entries[k]
    is_params = EllipticalParams(base.means, np.eye(p), pi_hat(base.partition))
    try:
        is_params = _scatter_params(base.means, base.pooled_var, pi_hat(base.partition))
    except SCEDError as exc:
        _warn(report, f"initializer variance unusable: {exc}")
    report.stages["IS"] = StageResult(base.partition, is_params, base.pooled_var, base.within_ss,
                                      time.perf_counter() - t0)
    if upto == "IS":
        return report

    # separation penalty
    t0 = time.perf_counter()
    try:
        best = separation_stage(x, entries, k, config, report)
        sp_part = best.partition
        if not sp_part.is_proper:
            raise SCEDError(f"separation penalty left {k - sp_part.n_nonempty()} empty clusters")
        _, sx = variance_estimates(x, best.beta, best.mu, sp_part)
        sp_params = _scatter_params(best.mu, sx, pi_hat(sp_part))
        report.stages["SP"] = StageResult(sp_part, sp_params, sx, best.fit_ss, time.perf_counter() - t0)
    except SCEDError as exc:
        _warn(report, f"SP stage failed, continuing from IS: {exc}")
        report.degraded = True
        report.stages["SP"] = report.stages["IS"]
    start = report.stages["SP"]
    if upto == "SP":
        return report

    # pseudo-likelihood
    t0 = time.perf_counter()
    y = tr.forward(quadratic_forms(x, start.params.means, start.params.scatter)
                   [np.arange(n), start.partition.index])
    bw = cv_bandwidth(y, config.cv_grid_size)
    report.bandwidths.update(h_tilde=bw.h_tilde, h_hat=bw.h_hat)
    res = maximize(config.objective, start.params, x, start.partition, bw.h_hat, tr,
                   max_evals=config.optimizer_max_evals, method=config.optimizer)
    pl_params = res.params
    est = GeneratorEstimate(tr.forward(quadratic_forms(x, pl_params.means, pl_params.scatter)
                                       [np.arange(n), start.partition.index]), bw.h_hat, tr)
    report.stages["PL"] = StageResult(start.partition, pl_params,
                                      variance_from_scatter(pl_params.scatter, est), res.value,
                                      time.perf_counter() - t0)
    report.diagnostics["pl_no_improvement"] = res.no_improvement
    report.diagnostics["pl_clamped"] = res.n_clamped
    if upto == "PL":
        return report

    # optimal clustering and refinement
    t0 = time.perf_counter()
    try:
        ref = refine_loop(x, start.partition, pl_params, bw.h_tilde, config.objective, tr,
                          max_iter=config.refine_max_iter, cv_grid_size=config.cv_grid_size,
                          max_evals=config.optimizer_max_evals, method=config.optimizer)
    except SCEDError as exc:
        ref = None
        _warn(report, f"refinement failed: {exc}")
    if ref is None or ref.degraded:
        report.degraded = True
        _warn(report, "refinement produced no proper partition; reporting the pseudo-likelihood stage")
        # posterior rule at the pseudo-likelihood estimate, generator from the SP partition
        part = refine_partition(posteriors(x, pl_params, bw.h_tilde, tr, start.partition))
        final_part = part if part.is_proper else start.partition
        report.stages["OC"] = StageResult(final_part, pl_params, report.stages["PL"].variance,
                                          res.value, time.perf_counter() - t0)
        h_loo = bw.h_tilde
        report.bandwidths.update(h_tilde_star=bw.h_tilde, h_hat_star=bw.h_hat)
    else:
        est = GeneratorEstimate(tr.forward(quadratic_forms(x, ref.params.means, ref.params.scatter)
                                           [np.arange(n), ref.partition.index]),
                                ref.bandwidth.h_hat, tr)
        report.stages["OC"] = StageResult(ref.partition, ref.params,
                                          variance_from_scatter(ref.params.scatter, est),
                                          ref.value, time.perf_counter() - t0)
        report.bandwidths.update(h_tilde_star=ref.bandwidth.h_tilde, h_hat_star=ref.bandwidth.h_hat)
        report.diagnostics.update(refine_sweeps=len(ref.history), refine_cycle=ref.cycle,
                                  refine_converged=ref.converged)
        h_loo = ref.bandwidth.h_tilde
    final = report.stages["OC"]
    _set_loo(report, loo_marginal(final.params, x, final.partition, h_loo, tr))
    return report


# ---------------------------------------------------------------------------
# Range of k
# ---------------------------------------------------------------------------

@dataclass
class RangeFit:
    reports: dict
    curve: SpicCurve

    @property
    def selected(self) -> FitReport | None:
        k = self.curve.selected
        return None if k is None else self.reports[k]


def fit_range(data, config: FitConfig) -> RangeFit:
    """Fit every ``k`` in ``config.k_range`` and select one by the criterion."""
    x = _values(data)
    n, p = x.shape
    ks = list(config.ks)
    shared = None
    if max(ks) >= 2:
        lo = max(2, min(ks))
        top = max(max(ks), kbar(n))
        shared = initialize(x, k_max=top, seed=config.seed, max_iter=config.init_max_iter,
                            restarts=config.kmeans_restarts, k_min=lo)
    reports: dict[int, FitReport] = {}

    def loo(k: int) -> float:
        reports[k] = fit_once(x, k, config, init_entries=shared)
        return reports[k].loo_loglik

    curve = select_k(n, p, ks, loo)
    return RangeFit(reports, curve)
