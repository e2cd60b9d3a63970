"""Posterior cluster probabilities and the refinement loop built on them.

Each point is assigned to the cluster with the largest estimated posterior
probability. Refinement alternates that assignment with bandwidth
reselection and re-maximization of the pseudo-likelihood on the new
partition until the partition repeats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import EllipticalParams, Partition, SCEDError, TransformSpec
from .density import BandwidthSelection, cv_bandwidth, quadratic_forms
from .likelihood import log_conditional_densities, maximize

log = logging.getLogger(__name__)


class CycleDetected(SCEDError):
    pass


@dataclass(frozen=True)
class PosteriorMatrix:
    probs: np.ndarray
    n_uniform: int = 0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


def posteriors(data, params: EllipticalParams, h: float, transform: TransformSpec,
               partition_for_g: Partition) -> PosteriorMatrix:
    """``pi_c f(x_i|c) / sum_c' pi_c' f(x_i|c')`` for every point and cluster.

    The generator estimate is built from ``partition_for_g``. Rows whose
    every component density is at the floor become uniform.
    """
    k = params.k
    n = partition_for_g.n
    if k == 1:
        return PosteriorMatrix(np.ones((n, 1)))
    lf, clamp = log_conditional_densities(params, data, partition_for_g, h, transform)
    with np.errstate(divide="ignore"):
        lj = lf + np.log(np.asarray(params.probs, dtype=float))[None, :]
    probs = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    dead = clamp.all(axis=1)
    probs[dead] = 1.0 / k
    return PosteriorMatrix(probs, int(dead.sum()))


def refine_partition(post) -> Partition:
    """Row-wise argmax of the posterior matrix, ties to the lowest label."""
    probs = post.probs if isinstance(post, PosteriorMatrix) else np.asarray(post, dtype=float)
    return Partition.from_zero_based(np.argmax(probs, axis=1), probs.shape[1])


def transformed_sample(data, params: EllipticalParams, partition: Partition,
                       transform: TransformSpec) -> np.ndarray:
    """Transformed quadratic forms of every point about its assigned centre."""
    x = data.values if hasattr(data, "values") else np.asarray(data, dtype=float)
    q = quadratic_forms(x, params.means, params.scatter)
    return transform.forward(q[np.arange(x.shape[0]), partition.index])


@dataclass
class RefineStep:
    iteration: int
    partition: Partition
    params: EllipticalParams
    value: float
    bandwidth: BandwidthSelection


@dataclass
class RefineResult:
    partition: Partition
    params: EllipticalParams
    value: float
    bandwidth: BandwidthSelection | None
    history: list = field(default_factory=list)
    converged: bool = False
    cycle: bool = False
    degraded: bool = False


def refine_loop(data, partition: Partition, params: EllipticalParams, h_post: float,
                objective: str, transform: TransformSpec, max_iter: int = 20,
                cv_grid_size: int = 40, max_evals: int = 4000,
                method: str = "lbfgs") -> RefineResult:
    """Alternate posterior reassignment with bandwidth reselection and re-maximization.

    Starting from ``(partition, params)`` with posterior bandwidth
    ``h_post``, every sweep reassigns points by maximal posterior, selects a
    bandwidth by cross-validation on the reassigned transformed sample,
    and re-maximizes ``objective`` at the inflated bandwidth. Stops when
    the reassigned partition equals the current one. A return to an
    earlier partition is a cycle: the best-objective iterate is returned.
    """
    x = data.values if hasattr(data, "values") else np.asarray(data, dtype=float)
    post = posteriors(x, params, h_post, transform, partition)
    part = refine_partition(post)
    history: list[RefineStep] = []
    seen: set[bytes] = set()
    result = RefineResult(partition, params, float("nan"), None, history, degraded=True)
    for it in range(1, max_iter + 1):
        if not part.is_proper:
            log.warning("refinement produced an empty cluster at sweep %d; stopping", it)
            result.degraded = not history
            break
        seen.add(part.key())
        bw = cv_bandwidth(transformed_sample(x, params, part, transform), cv_grid_size)
        res = maximize(objective, params, x, part, bw.h_hat, transform,
                       max_evals=max_evals, method=method)
        params = res.params
        history.append(RefineStep(it, part, params, res.value, bw))
        result = RefineResult(part, params, res.value, bw, history, degraded=False)
        new = refine_partition(posteriors(x, params, bw.h_tilde, transform, part))
        if new.same_as(part):
            result.converged = True
            break
        if new.key() in seen:
            best = max(history, key=lambda s: s.value)
            log.info("refinement cycled after %d sweeps; keeping the best iterate", it)
            result = RefineResult(best.partition, best.params, best.value, best.bandwidth,
                                  history, cycle=True)
            break
        part = new
    return result
