"""Simulation designs, evaluation metrics and the Monte Carlo grid runner.

Two radial laws are available: ``m1``, whose generator is
``y^5 (45/4 - y)^{1/4}`` on ``[0, 45/4]`` (bounded support), and ``m2``,
the normal generator. Draws are rescaled so that the within-cluster
variance equals the design's ``sigma_x`` exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import rand_score

from .core import (Dataset, EllipticalParams, FitConfig, LengthMismatch, Partition, SCEDError,
                   scatter_from_variance)
from .initialization import cluster_means, kmeans, pooled_within_variance

log = logging.getLogger(__name__)

M1_RMAX = 1.5 * math.sqrt(5.0)  # sqrt(45/4)
M1_TABLE_SIZE = 4096
METHODS = ("kmeans", "IS", "SP", "PL", "OC")
ALL_METHODS = METHODS + ("spic",)


class InvalidDesign(SCEDError):
    pass


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimDesign:
    p: int
    k: int
    n: int
    sigma: float
    generator: str = "m1"
    replications: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.generator not in ("m1", "m2"):
            raise InvalidDesign(f"unknown generator {self.generator!r}")
        if self.k not in (2, 3):
            raise InvalidDesign("mean sets are defined for k = 2 and k = 3 only")
        if self.p < 1 or self.n < 2:
            raise InvalidDesign("need p >= 1 and n >= 2")
        if not self.sigma >= 0:
            raise InvalidDesign("sigma must be non-negative")

    @property
    def probs(self) -> np.ndarray:
        return np.array([0.6, 0.4]) if self.k == 2 else np.array([0.4, 0.3, 0.3])

    @property
    def means(self) -> np.ndarray:
        alt = np.where(np.arange(self.p) % 2 == 0, 1.5, 0.0)
        rows = [np.zeros(self.p), alt] if self.k == 2 else [np.zeros(self.p), np.full(self.p, 1.5), alt]
        return np.array(rows)

    @property
    def sigma_x(self) -> np.ndarray:
        return self.sigma ** 2 * (0.175 * np.eye(self.p) + 0.075 * np.ones((self.p, self.p)))

    def key(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def label(self) -> str:
        return f"{self.generator}-p{self.p}-k{self.k}-s{self.sigma:g}-n{self.n}"


# ---------------------------------------------------------------------------
# Radial draws
# ---------------------------------------------------------------------------

def _m1_unnormalized(r, p):
    r = np.asarray(r, dtype=float)
    inside = np.clip(45.0 / 4.0 - r * r, 0.0, None)
    return r ** (p + 9) * inside ** 0.25


@lru_cache(maxsize=None)
def m1_table(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Radius grid and cumulative distribution of the M1 radial law."""
    r = np.linspace(0.0, M1_RMAX, M1_TABLE_SIZE)
    dens = _m1_unnormalized(r, p)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(r))])
    cdf /= cdf[-1]
    return r, cdf


@lru_cache(maxsize=None)
def radial_second_moment(generator: str, p: int) -> float:
    """E[R^2] of the radial law."""
    if generator == "m2":
        return float(p)
    num = quad(lambda r: r * r * _m1_unnormalized(r, p), 0.0, M1_RMAX, limit=200)[0]
    den = quad(lambda r: _m1_unnormalized(r, p), 0.0, M1_RMAX, limit=200)[0]
    return num / den


def sample_radial(generator: str, p: int, rng: np.random.Generator, size=None):
    """Draw radii ``R = ||U||`` for the spherical part of the model."""
    if generator == "m2":
        return np.sqrt(rng.chisquare(p, size=size))
    if generator == "m1":
        r, cdf = m1_table(p)
        u = rng.random(size=size)
        return np.interp(u, cdf, r)
    raise InvalidDesign(f"unknown generator {generator!r}")


def generate_dataset(design: SimDesign, rng: np.random.Generator):
    """Draw one data set; returns (Dataset, true Partition, true EllipticalParams).

    The true parameters carry the normalized scatter; the variance matrix is
    ``design.sigma_x``.
    """
    n, p, k = design.n, design.p, design.k
    labels = rng.choice(k, size=n, p=design.probs)
    radius = sample_radial(design.generator, p, rng, size=n)
    direction = rng.standard_normal((n, p))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    u = direction * (radius / math.sqrt(radial_second_moment(design.generator, p) / p))[:, None]
    if design.sigma > 0:
        chol = np.linalg.cholesky(design.sigma_x)
        x = design.means[labels] + u @ chol.T
        scatter, _ = scatter_from_variance(design.sigma_x)
    else:
        x = design.means[labels].astype(float)
        scatter = 0.175 * np.eye(p) + 0.075 * np.ones((p, p))
        scatter = scatter / scatter[0, 0]
    truth = EllipticalParams(design.means, scatter, design.probs)
    return Dataset(x), Partition.from_zero_based(labels, k), truth


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _labels(part) -> np.ndarray:
    return part.labels if isinstance(part, Partition) else np.asarray(part)


def rand_index(a, b) -> float:
    """Fraction of point pairs on which two partitions agree."""
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise LengthMismatch(f"{la.size} vs {lb.size} labels")
    if la.size < 2:
        return 1.0
    return float(rand_score(la, lb))


def rse(estimate, truth) -> float:
    """sqrt(||estimate - truth||^2 / number of entries)."""
    e = np.ravel(np.asarray(estimate, dtype=float))
    t = np.ravel(np.asarray(truth, dtype=float))
    if e.shape != t.shape:
        raise LengthMismatch(f"{e.size} vs {t.size} entries")
    return float(math.sqrt(np.sum((e - t) ** 2) / t.size))


def align_means(estimate, truth) -> np.ndarray:
    """Permutation ``order`` with ``estimate[order]`` matched to ``truth`` rows.

    Minimizes the summed squared distance between matched rows.
    """
    est = np.atleast_2d(estimate)
    tru = np.atleast_2d(truth)
    cost = ((tru[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def upper_triangle(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return m[np.triu_indices(m.shape[0])]


def variance_rse(estimate, truth) -> float:
    """RSE over the upper-triangular entries (diagonal included)."""
    return rse(upper_triangle(estimate), upper_triangle(truth))


# ---------------------------------------------------------------------------
# One replication
# ---------------------------------------------------------------------------

def _stage_needed(methods) -> str:
    order = ("IS", "SP", "PL", "OC")
    last = "IS"
    for m in methods:
        if m in order and order.index(m) > order.index(last):
            last = m
    return last


def replication_seeds(design: SimDesign, rep: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([design.seed, rep])
    data_ss, fit_ss = ss.spawn(2)
    return np.random.default_rng(data_ss), int(fit_ss.generate_state(1)[0])


def run_replication(design: SimDesign, rep: int, methods=METHODS, objective: str = "pl1",
                    config: FitConfig | None = None) -> list[dict]:
    """Fit one replication and return one metrics row per method.

    The ``spic`` method fits every ``k`` in ``config.k_range`` and records
    the selected number of clusters as ``k_hat``; its other metrics are
    left empty.
    """
    from .pipeline import fit_once, fit_range

    rng, fit_seed = replication_seeds(design, rep)
    data, truth, _ = generate_dataset(design, rng)
    x = data.values
    cfg = config or FitConfig(k_range=(design.k, design.k))
    cfg = dataclasses.replace(cfg, seed=fit_seed, objective=objective)
    results: dict[str, tuple] = {}
    if "kmeans" in methods:
        part = kmeans(x, design.k, seed=fit_seed, restarts=cfg.kmeans_restarts)
        means = cluster_means(x, part)
        results["kmeans"] = (part, means, pooled_within_variance(x, part, means, check=False))
    k_hat = None
    if "spic" in methods:
        k_hat = fit_range(x, cfg).curve.selected
    fit_methods = [m for m in methods if m not in ("kmeans", "spic")]
    if fit_methods:
        report = fit_once(x, design.k, cfg, upto=_stage_needed(fit_methods))
        for m in fit_methods:
            st = report.stages[m]
            results[m] = (st.partition, st.params.means, st.variance)
    rows = []
    for m in methods:
        if m == "spic":
            rows.append(dict(design=design.label(), method=m, objective=objective, rep=rep,
                             ri=None, rse_mean=None, rse_var=None, k_hat=k_hat))
            continue
        part, means, var = results[m]
        order = align_means(means, design.means)
        rows.append(dict(design=design.label(), method=m, objective=objective, rep=rep,
                         ri=rand_index(part, truth),
                         rse_mean=rse(np.asarray(means)[order], design.means),
                         rse_var=variance_rse(var, design.sigma_x)))
    return rows


# ---------------------------------------------------------------------------
# Grid runner with checkpoints
# ---------------------------------------------------------------------------

CSV_FIELDS = ("design", "method", "objective", "rep", "ri", "rse_mean", "rse_var", "k_hat",
              "error")


def _ckpt_path(out: Path, design: SimDesign, objective: str, methods, rep: int,
               config: FitConfig | None = None) -> Path:
    cfg = "" if config is None else json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    tag = hashlib.sha256(("|".join(methods) + objective + cfg).encode()).hexdigest()[:8]
    return out / "checkpoints" / f"{design.key()}-{tag}-{rep:05d}.json"


def _task(args):
    design, rep, methods, objective, config = args
    t0 = time.perf_counter()
    try:
        rows = run_replication(design, rep, methods, objective, config)
    except Exception as exc:  # noqa: BLE001 - one failing replication must not stop the grid
        log.warning("%s rep %d failed: %s", design.label(), rep, exc)
        rows = [dict(design=design.label(), method=m, objective=objective, rep=rep,
                     ri=None, rse_mean=None, rse_var=None, error=f"{type(exc).__name__}: {exc}")
                for m in methods]
    for r in rows:
        r.setdefault("error", "")
        r["seconds"] = time.perf_counter() - t0
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and Monte Carlo standard error per design x method.

    RI and RSE are scaled by 100; ``k_hat`` is left unscaled.
    """
    cells: dict[tuple, list] = {}
    for r in rows:
        cells.setdefault((r["design"], r["method"], r["objective"]), []).append(r)
    out = []
    for (design, method, objective), rs in cells.items():
        ok = [r for r in rs if not r.get("error")]
        entry = dict(design=design, method=method, objective=objective,
                     replications=len(rs), failures=len(rs) - len(ok))
        for metric, scale in (("ri", 100.0), ("rse_mean", 100.0), ("rse_var", 100.0),
                              ("k_hat", 1.0)):
            vals = np.array([r[metric] for r in ok if r.get(metric) is not None], dtype=float) * scale
            entry[metric] = float(vals.mean()) if vals.size else None
            entry[metric + "_se"] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else None
        out.append(entry)
    return out


def run_grid(designs, methods=METHODS, out_dir=None, objective: str = "pl1",
             config: FitConfig | None = None, workers: int = 1, resume: bool = True) -> list[dict]:
    """Run every design x replication; returns the summary table.

    With ``out_dir`` each replication is checkpointed to JSON as soon as it
    finishes, per-replication rows go to ``results.csv`` and the summary to
    ``summary.json``. A rerun with ``resume=True`` skips finished
    replications.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(ALL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    todo = []
    for d in designs:
        for rep in range(d.replications):
            path = _ckpt_path(out, d, objective, methods, rep, config) if out is not None else None
            if resume and path is not None and path.exists():
                rows.extend(json.loads(path.read_text()))
                continue
            todo.append((d, rep, methods, objective, config))

    def store(task, result):
        rows.extend(result)
        if out is not None:
            path = _ckpt_path(out, task[0], objective, methods, task[1], config)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(result, sort_keys=True))
            os.replace(tmp, path)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for task, result in zip(todo, pool.map(_task, todo)):
                store(task, result)
    else:
        for task in todo:
            store(task, _task(task))

    order = {d.label(): i for i, d in enumerate(designs)}
    rows.sort(key=lambda r: (order.get(r["design"], 0), r["rep"], methods.index(r["method"])))
    summary = summarize(rows)
    if out is not None:
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_FIELDS})
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def format_table(summary: list[dict], metric: str = "ri") -> str:
    """Rows per design, columns per method, values x100 with standard errors."""
    designs = list(dict.fromkeys(s["design"] for s in summary))
    methods = list(dict.fromkeys(s["method"] for s in summary))
    cell = {(s["design"], s["method"]): s for s in summary}
    width = max(len(d) for d in designs) if designs else 6
    lines = ["design".ljust(width) + "".join(f"{m:>18}" for m in methods)]
    for d in designs:
        parts = []
        for m in methods:
            s = cell.get((d, m))
            if s is None or s[metric] is None:
                parts.append(f"{'-':>18}")
            else:
                se = s[metric + "_se"]
                parts.append(f"{s[metric]:>10.2f} ({se if se is not None else 0:.2f})")
        lines.append(d.ljust(width) + "".join(parts))
    return "\n".join(lines)
