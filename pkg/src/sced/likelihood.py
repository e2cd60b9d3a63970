"""Pseudo-likelihoods built on the kernel generator estimate, and their maximization.

``pl1`` sums log plug-in densities over each point's assigned cluster,
``pl2`` is the mixture (marginal) version. In both, the generator
estimate is rebuilt from the current parameters at every evaluation, using
the transformed quadratic forms of the points about their assigned
centres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .core import (Dataset, EllipticalParams, EmptyCluster, Partition, SCEDError,
                   TransformSpec, validate_params)
from .density import GeneratorEstimate, _chol, kernel_boundary, log_weight, quadratic_forms

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
LOG_FLOOR = float(np.log(DENSITY_FLOOR))


class NoImprovement(SCEDError):
    pass


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)


# ---------------------------------------------------------------------------
# Parameterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaParameterization:
    """Unconstrained coordinates for (means, scatter[, mixing weights]).

    The scatter is ``L L'`` with ``L`` lower triangular, ``L[0,0] = 1``
    fixed and the remaining diagonal stored on the log scale, so every
    decoded scatter is SPD with first diagonal entry exactly one. Mixing
    weights, when free, are logits relative to the first cluster.
    """

    k: int
    p: int
    free_probs: bool = False

    @property
    def n_mean(self) -> int:
        return self.k * self.p

    @property
    def n_chol(self) -> int:
        return self.p * (self.p + 1) // 2 - 1

    @property
    def size(self) -> int:
        return self.n_mean + self.n_chol + (self.k - 1 if self.free_probs else 0)

    def _tril(self):
        rows, cols = np.tril_indices(self.p)
        keep = ~((rows == 0) & (cols == 0))
        return rows[keep], cols[keep]

    def encode(self, params: EllipticalParams) -> np.ndarray:
        scatter = np.asarray(params.scatter, dtype=float)
        scatter = scatter / scatter[0, 0]
        L = np.linalg.cholesky(scatter)
        rows, cols = self._tril()
        vals = L[rows, cols].copy()
        diag = rows == cols
        vals[diag] = np.log(vals[diag])
        parts = [np.asarray(params.means, dtype=float).ravel(), vals]
        if self.free_probs:
            lp = np.log(np.asarray(params.probs, dtype=float))
            parts.append(lp[1:] - lp[0])
        return np.concatenate(parts)

    def decode_scatter(self, vec) -> tuple[np.ndarray, np.ndarray]:
        """Return (scatter, its Cholesky factor)."""
        L = np.zeros((self.p, self.p))
        L[0, 0] = 1.0
        rows, cols = self._tril()
        vals = np.asarray(vec[self.n_mean:self.n_mean + self.n_chol], dtype=float).copy()
        diag = rows == cols
        vals[diag] = np.exp(vals[diag])
        L[rows, cols] = vals
        scatter = L @ L.T
        scatter[0, 0] = 1.0
        return scatter, L

    def decode(self, vec, probs=None) -> EllipticalParams:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} coordinates, got {vec.size}")
        means = vec[:self.n_mean].reshape(self.k, self.p)
        scatter, _ = self.decode_scatter(vec)
        if self.free_probs:
            logits = np.concatenate([[0.0], vec[self.n_mean + self.n_chol:]])
            probs = np.exp(logits - logsumexp(logits))
        elif probs is None:
            raise ValueError("probs must be supplied when they are not free")
        return EllipticalParams(means, scatter, np.asarray(probs, dtype=float))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLikelihoodValue:
    value: float
    per_point: np.ndarray
    n_clamped: int = 0


def pi_hat(partition: Partition) -> np.ndarray:
    """Cluster proportions ``|G_c| / n``."""
    sizes = partition.sizes()
    if np.any(sizes == 0):
        raise EmptyCluster("cannot estimate mixing weights with empty clusters")
    return sizes / partition.n


def _components(params: EllipticalParams, x, partition: Partition, h: float,
                transform: TransformSpec, chol=None):
    """Transformed forms, generator estimate and log w for every (point, cluster)."""
    L = _chol(params.scatter) if chol is None else chol
    q = quadratic_forms(x, params.means, params.scatter, chol=L)
    y = transform.forward(q)
    y_own = y[np.arange(x.shape[0]), partition.index]
    est = GeneratorEstimate(y_own, h, transform)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    lw = log_weight(y, params.scatter, transform, logdet=logdet)
    return y, y_own, est, lw


def _floored_log_density(lw, g):
    """``log(w g)`` with densities below the floor replaced by the floor."""
    with np.errstate(divide="ignore"):
        out = lw + np.log(g)
    clamp = ~(out >= LOG_FLOOR)
    out = np.where(clamp, LOG_FLOOR, out)
    return out, clamp


def log_conditional_densities(params: EllipticalParams, data, partition: Partition, h: float,
                              transform: TransformSpec, loo: bool = False, chol=None):
    """n x k matrix of ``log f(x_i | c)`` (floored) and the clamp mask.

    With ``loo=True`` the generator estimate used for row ``i`` omits the
    point's own transformed value.
    """
    x = _values(data)
    y, y_own, est, lw = _components(params, x, partition, h, transform, chol)
    g = est.kernel_sums(y)
    n = x.shape[0]
    if loo:
        g = (g - kernel_boundary(y_own[:, None], y, h)) / (n - 1)
        g = np.maximum(g, 0.0)
    else:
        g = g / n
    return _floored_log_density(lw, g)


def pl1(params: EllipticalParams, data, partition: Partition, h: float,
        transform: TransformSpec, chol=None) -> PseudoLikelihoodValue:
    """Sum over points of ``log(pi_c f(x_i | c))`` for the assigned cluster ``c``."""
    x = _values(data)
    L = _chol(params.scatter) if chol is None else chol
    y, y_own, est, _ = _components(params, x, partition, h, transform, L)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    lw = log_weight(y_own, params.scatter, transform, logdet=logdet)
    lf, clamp = _floored_log_density(lw, est(y_own))
    per = np.log(np.asarray(params.probs)[partition.index]) + lf
    return PseudoLikelihoodValue(float(per.sum()), per, int(clamp.sum()))


def _marginal(params, data, partition, h, transform, loo, chol=None):
    lf, clamp = log_conditional_densities(params, data, partition, h, transform, loo=loo, chol=chol)
    with np.errstate(divide="ignore"):
        lp = np.log(np.asarray(params.probs, dtype=float))
    per = logsumexp(lf + lp[None, :], axis=1)
    return PseudoLikelihoodValue(float(per.sum()), per, int(clamp.all(axis=1).sum()))


def pl2(params: EllipticalParams, data, partition: Partition, h: float,
        transform: TransformSpec, chol=None) -> PseudoLikelihoodValue:
    """Sum over points of ``log sum_c pi_c f(x_i | c)``.

    The generator estimate is still built from the hard partition.
    """
    return _marginal(params, data, partition, h, transform, loo=False, chol=chol)


def loo_marginal(params: EllipticalParams, data, partition: Partition, h: float,
                 transform: TransformSpec) -> PseudoLikelihoodValue:
    """Leave-one-out marginal log-likelihood with per-point terms and the floor count."""
    if _values(data).shape[0] < 2:
        raise ValueError("need at least two points")
    return _marginal(params, data, partition, h, transform, loo=True)


def loo_marginal_loglik(params: EllipticalParams, data, partition: Partition, h: float,
                        transform: TransformSpec) -> float:
    """Leave-one-out marginal log-likelihood used by the information criterion."""
    return loo_marginal(params, data, partition, h, transform).value


def evaluate(kind: str, params, data, partition, h, transform) -> PseudoLikelihoodValue:
    if kind == "pl1":
        return pl1(params, data, partition, h, transform)
    if kind == "pl2":
        return pl2(params, data, partition, h, transform)
    raise ValueError(f"unknown objective {kind!r}")


# ---------------------------------------------------------------------------
# Maximization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaximizeResult:
    params: EllipticalParams
    value: float
    init_value: float
    n_evals: int
    n_clamped: int
    no_improvement: bool = False


def maximize(objective: str, init: EllipticalParams, data, partition: Partition, h: float,
             transform: TransformSpec, max_evals: int = 4000, method: str = "lbfgs",
             restarts: int = 1) -> MaximizeResult:
    """Maximize ``pl1`` or ``pl2`` over means, scatter (and weights for ``pl2``).

    For ``pl1`` the weights are held at the cluster proportions of
    ``partition``. The search runs in the unconstrained coordinates of
    :class:`ThetaParameterization`, restarting ``restarts`` times from the
    incumbent. The returned value is never below the value at ``init``;
    if no candidate improves on it, ``init`` comes back flagged.
    """
    x = _values(data)
    if objective not in ("pl1", "pl2"):
        raise ValueError(f"unknown objective {objective!r}")
    free = objective == "pl2"
    k, p = init.means.shape
    probs_fixed = pi_hat(partition) if not free else None
    if not free:
        init = init.with_(probs=probs_fixed)
    init = validate_params(init)
    param = ThetaParameterization(k, p, free_probs=free)
    fn = pl1 if objective == "pl1" else pl2
    n_evals = 0

    def neg(vec):
        nonlocal n_evals
        n_evals += 1
        if not np.all(np.isfinite(vec)):
            return np.inf
        tail = vec[param.n_mean:]
        if tail.size and np.max(np.abs(tail)) > 30:
            return np.inf
        scatter, L = param.decode_scatter(vec)
        prm = param.decode(vec, probs_fixed)
        try:
            val = fn(prm, x, partition, h, transform, chol=L).value
        except SCEDError:
            return np.inf
        return -val if np.isfinite(val) else np.inf

    x0 = param.encode(init)
    f0 = neg(x0)
    best_x, best_f = x0, f0
    for _ in range(restarts + 1):
        res = _run(neg, best_x, method, max_evals)
        if res.fun < best_f:
            best_x, best_f = np.asarray(res.x), float(res.fun)
    if not best_f < f0:
        init_val = fn(init, x, partition, h, transform)
        return MaximizeResult(init, init_val.value, init_val.value, n_evals,
                              init_val.n_clamped, no_improvement=True)
    out = param.decode(best_x, probs_fixed)
    val = fn(out, x, partition, h, transform)
    return MaximizeResult(out, val.value, -f0, n_evals, val.n_clamped)


def _run(fun, x0, method: str, max_evals: int):
    if method == "nelder-mead":
        return minimize(fun, x0, method="Nelder-Mead",
                        options=dict(maxfev=max_evals, adaptive=True, xatol=1e-7, fatol=1e-9))
    if method == "powell":
        return minimize(fun, x0, method="Powell",
                        options=dict(maxfev=max_evals, xtol=1e-6, ftol=1e-10))
    if method == "lbfgs":
        return minimize(fun, x0, method="L-BFGS-B",
                        options=dict(maxfun=max_evals, ftol=1e-12, gtol=1e-7))
    raise ValueError(f"unknown optimizer {method!r}")
