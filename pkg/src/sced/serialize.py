"""CSV ingestion and JSON/CSV output for fit reports.

Reports are written with sorted keys and fixed indentation so that two
runs with the same inputs differ only in the ``manifest.timestamps``
block.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .core import Dataset, FitConfig, SCEDError

REPORT_SCHEMA = "sced.report/1"
TRUTH_SCHEMA = "sced.truth/1"
MANIFEST_SCHEMA = "sced.manifest/1"


class ParseError(SCEDError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# CSV in
# ---------------------------------------------------------------------------

@dataclass
class Table:
    header: list
    values: np.ndarray
    labels: np.ndarray | None = None
    label_column: str | None = None


def read_csv(path, label_column: str | None = None) -> Table:
    """Read a numeric CSV with a header row.

    ``label_column`` (if given) is split off and returned separately; it
    must hold integers.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, 1, "empty file") from None
        header = [h.strip() for h in header]
        if not header or any(h == "" for h in header):
            raise ParseError(1, 1, "header row is required and must name every column")
        if label_column is not None and label_column not in header:
            raise ParseError(1, 1, f"label column {label_column!r} not found")
        lab_idx = header.index(label_column) if label_column is not None else None
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(lineno, min(len(row), len(header)) + 1,
                                 f"expected {len(header)} fields, found {len(row)}")
            vals = []
            for j, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(lineno, j + 1, f"not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(lineno, j + 1, f"non-finite value: {cell!r}")
                if j == lab_idx:
                    if v != int(v):
                        raise ParseError(lineno, j + 1, f"label is not an integer: {cell!r}")
                    labels.append(int(v))
                else:
                    vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(2, 1, "no data rows")
    cols = [h for j, h in enumerate(header) if j != lab_idx]
    return Table(cols, np.array(rows, dtype=float),
                 np.array(labels, dtype=np.int64) if lab_idx is not None else None, label_column)


def write_matrix_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# JSON out
# ---------------------------------------------------------------------------

def to_jsonable(obj):
    """Convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str | None
    version: str = __version__
    timestamps: dict = field(default_factory=dict)
    schema: str = MANIFEST_SCHEMA

    def start(self) -> None:
        self.timestamps["started"] = _now()

    def finish(self) -> None:
        self.timestamps["finished"] = _now()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["python"] = platform.python_version()
        return d

    def append_to(self, path) -> None:
        """Append one JSON line; earlier manifests are never rewritten."""
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(to_jsonable(self.to_dict()), sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_dict(config: FitConfig) -> dict:
    d = asdict(config)
    d["k_range"] = list(config.k_range)
    return d


def params_dict(params, dataset: Dataset | None = None) -> dict:
    out = dict(means=params.means, scatter=params.scatter, probs=params.probs)
    if dataset is not None and dataset.standardized:
        out["means_original_scale"] = dataset.to_original(params.means)
    return out


def report_dict(report, dataset: Dataset | None = None, posteriors=None) -> dict:
    """Plain-data view of a :class:`sced.pipeline.FitReport`."""
    stages = {}
    for name, st in report.stages.items():
        stages[name] = dict(labels=st.partition.labels, sizes=st.partition.sizes(),
                            params=params_dict(st.params, dataset), variance=st.variance,
                            objective=st.objective)
    out = dict(k=report.k, n=report.n, p=report.p, objective=report.objective, seed=report.seed,
               stages=stages, stage_order=list(report.stages), bandwidths=report.bandwidths, lambda_star=report.lambda_star,
               lambda_grid=report.lambda_grid, loo_loglik=report.loo_loglik,
               diagnostics=report.diagnostics, warnings=report.warnings, degraded=report.degraded)
    if posteriors is not None:
        out["posteriors"] = posteriors
    return out


def stage_timings(report) -> dict:
    return {name: st.wall_time for name, st in report.stages.items()}


def python_info() -> str:
    return sys.version.split()[0]
