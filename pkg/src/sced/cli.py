"""Command-line entry point: ``sced fit``, ``sced simulate``, ``sced bench``.

Exit codes: 0 success, 1 partial benchmark failure, 2 usage or parse
error, 3 data validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .clustering import posteriors
from .core import ConstantColumn, Dataset, FitConfig, SCEDError, TooFewPoints, standardize
from .density import GeneratorEstimate, quadratic_forms
from .pipeline import fit_once, fit_range
from .serialize import (REPORT_SCHEMA, TRUTH_SCHEMA, ParseError, RunManifest, config_dict, dumps,
                        file_hash, read_csv, report_dict, stage_timings, write_matrix_csv)
from .simulation import (METHODS, InvalidDesign, SimDesign, format_table, generate_dataset,
                         rand_index, run_grid)

log = logging.getLogger("sced")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

PROFILES = {
    # Table 1 subset at desk scale
    "paper-mini": dict(
        designs=[dict(p=6, k=2, n=250, sigma=s, generator="m1", replications=50, seed=1000)
                 for s in (1.0, 1.4)],
        methods=list(METHODS), objective="pl1"),
    # every design of the simulation study at full replication count
    "full": dict(
        designs=[dict(p=p, k=k, n=n, sigma=s, generator=g, replications=500, seed=1)
                 for g in ("m1", "m2") for (p, k) in ((6, 2), (10, 2), (10, 3))
                 for s in (1.0, 1.2, 1.4, 1.6) for n in (125, 250, 500, 750, 1000)],
        methods=list(METHODS), objective="pl1"),
}


class UsageError(SCEDError):
    pass


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _k_range(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        lo, hi = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid range {text!r}")
    return lo, hi


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sced", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="cluster a numeric CSV file")
    fit.add_argument("csv", help="input CSV with a header row")
    g = fit.add_mutually_exclusive_group()
    g.add_argument("--k", type=_positive(int), help="number of clusters")
    g.add_argument("--k-range", type=_k_range, help="select k from A:B by the information criterion")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--d0", type=_positive(float), default=1.0)
    fit.add_argument("--lambda-grid", type=int, default=20, metavar="J")
    fit.add_argument("--objective", choices=("pl1", "pl2"), default="pl1")
    fit.add_argument("--threads", type=_positive(int), default=1)
    fit.add_argument("--out", default="sced-out", metavar="DIR")
    fit.add_argument("--no-standardize", action="store_true")
    fit.add_argument("--label-column", help="integer column held out of the fit, used for RI")
    fit.add_argument("--config", help="JSON file with FitConfig fields (flags take precedence)")

    sim = sub.add_parser("simulate", help="draw a data set from a simulation design")
    sim.add_argument("--model", choices=("m1", "m2"), required=True)
    sim.add_argument("--p", type=_positive(int), required=True)
    sim.add_argument("--k", type=int, required=True)
    sim.add_argument("--sigma", type=_positive(float), required=True)
    sim.add_argument("--n", type=_positive(int), required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="sced-sim", metavar="DIR")

    bench = sub.add_parser("bench", help="run a Monte Carlo grid")
    src = bench.add_mutually_exclusive_group(required=True)
    src.add_argument("grid", nargs="?", help="JSON grid file")
    src.add_argument("--profile", choices=sorted(PROFILES))
    bench.add_argument("--out", default="sced-bench", metavar="DIR")
    bench.add_argument("--threads", type=_positive(int), default=1)
    bench.add_argument("--no-resume", action="store_true")
    bench.add_argument("--metric", choices=("ri", "rse_mean", "rse_var"), default="ri")
    return ap


def _threads(flag: int) -> int:
    env = os.environ.get("SCED_THREADS")
    if env:
        try:
            v = int(env)
            if v > 0:
                return v
        except ValueError:
            pass
        raise UsageError(f"SCED_THREADS must be a positive integer, got {env!r}")
    return flag


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _fit_config(args) -> FitConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        known = {f.name for f in dataclasses.fields(FitConfig)}
        extra = set(base) - known
        if extra:
            raise UsageError(f"unknown config fields: {sorted(extra)}")
    if args.k is not None:
        base["k_range"] = (args.k, args.k)
    elif args.k_range is not None:
        base["k_range"] = args.k_range
    elif "k_range" not in base:
        raise UsageError("one of --k or --k-range is required")
    base.update(seed=args.seed, d0=args.d0, lambda_grid_size=args.lambda_grid,
                objective=args.objective)
    try:
        return FitConfig(**base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_fit(args) -> int:
    config = _fit_config(args)
    try:
        table = read_csv(args.csv, args.label_column)
    except OSError as exc:
        raise UsageError(f"cannot read {args.csv}: {exc}") from exc
    manifest = RunManifest("fit", config_dict(config), config.seed, file_hash(args.csv))
    manifest.start()
    data = Dataset(table.values)
    if not args.no_standardize:
        data = standardize(data)
    out = Path(args.out)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)

    x = data.values
    spic_rows = None
    if config.k_range[0] == config.k_range[1]:
        report = fit_once(x, config.k_range[0], config)
    else:
        rf = fit_range(data, config)
        if rf.selected is None:
            raise SCEDError("no k in the requested range could be fitted")
        report = rf.selected
        spic_rows = rf.curve.rows()
    tr = config.transform(data.p)
    final = report.final
    h_post = report.bandwidths.get("h_tilde_star", report.bandwidths.get("h_tilde"))
    post = posteriors(x, final.params, h_post, tr, final.partition).probs

    body = report_dict(report, data, posteriors=post)
    body["schema"] = REPORT_SCHEMA
    body["input"] = dict(path=os.path.basename(args.csv), columns=table.header,
                         standardized=data.standardized, col_means=data.col_means,
                         col_sds=data.col_sds)
    if spic_rows is not None:
        body["spic"] = dict(curve=[dict(k=k, loo_loglik=l, spic=s) for k, l, s in spic_rows],
                            selected=report.k, failures=rf.curve.failures)
    if table.labels is not None:
        body["rand_index_vs_labels"] = {name: rand_index(st.partition.labels, table.labels)
                                        for name, st in report.stages.items()}

    # plot data
    n = x.shape[0]
    y = tr.forward(quadratic_forms(x, final.params.means, final.params.scatter)
                   [np.arange(n), final.partition.index])
    est = GeneratorEstimate(y, report.bandwidths.get("h_hat_star", report.bandwidths["h_hat"]), tr)
    grid = np.linspace(0.0, est.support_end(), 256)
    write_matrix_csv(out / "plotdata" / "ghat.csv", ["y", "ghat"], zip(grid, est(grid)))
    if spic_rows is not None:
        write_matrix_csv(out / "plotdata" / "spic.csv", ["k", "loo_loglik", "spic"], spic_rows)
    if report.lambda_path:
        write_matrix_csv(out / "plotdata" / "lambda_path.csv",
                         ["lambda", "fit_ss", "n_clusters", "converged", "iterations"],
                         [(a, b, c, int(d), e) for a, b, c, d, e in report.lambda_path])

    write_matrix_csv(out / "assignments.csv",
                     ["row_id", "label"] + [f"post_{c + 1}" for c in range(report.k)],
                     ([i + 1, int(final.partition.labels[i])] + list(post[i]) for i in range(n)))
    manifest.finish()
    manifest.timestamps["stage_seconds"] = stage_timings(report)
    body["manifest"] = manifest.to_dict()
    (out / "report.json").write_text(dumps(body))
    manifest.append_to(out / "manifest.jsonl")
    print(f"k={report.k} sizes={final.partition.sizes().tolist()} -> {out / 'report.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        design = SimDesign(p=args.p, k=args.k, n=args.n, sigma=args.sigma, generator=args.model,
                           replications=1, seed=args.seed)
    except InvalidDesign as exc:
        raise UsageError(str(exc)) from exc
    rng = np.random.default_rng(args.seed)
    data, truth, params = generate_dataset(design, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "data.csv", [f"x{j + 1}" for j in range(design.p)], data.values)
    body = dict(schema=TRUTH_SCHEMA, design=dataclasses.asdict(design), labels=truth.labels,
                means=design.means, sigma_x=design.sigma_x, scatter=params.scatter,
                probs=design.probs, seed=args.seed)
    (out / "truth.json").write_text(dumps(body))
    print(f"wrote {design.n} x {design.p} data to {out / 'data.csv'}")
    return EXIT_OK


def _load_grid(args) -> dict:
    if args.profile:
        return PROFILES[args.profile]
    try:
        return json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read grid {args.grid}: {exc}") from exc


def cmd_bench(args) -> int:
    grid = _load_grid(args)
    try:
        designs = [SimDesign(**d) for d in grid["designs"]]
        methods = tuple(grid.get("methods", METHODS))
        objective = grid.get("objective", "pl1")
        config = FitConfig(**grid["config"]) if "config" in grid else None
    except (KeyError, TypeError, ValueError, InvalidDesign) as exc:
        raise UsageError(f"invalid grid: {exc}") from exc
    out = Path(args.out)
    manifest = RunManifest("bench", dict(grid=grid), 0,
                           file_hash(args.grid) if args.grid else None)
    manifest.start()
    summary = run_grid(designs, methods, out_dir=out, objective=objective, config=config,
                       workers=_threads(args.threads), resume=not args.no_resume)
    manifest.finish()
    out.mkdir(parents=True, exist_ok=True)
    manifest.append_to(out / "manifest.jsonl")
    scale = "x10^2"
    print(f"{args.metric} ({scale}, MC standard errors in parentheses)")
    print(format_table(summary, args.metric))
    failed = [s for s in summary if s["failures"] == s["replications"]]
    partial = [s for s in summary if 0 < s["failures"] < s["replications"]]
    if partial:
        print(f"{len(partial)} cell(s) had failed replications", file=sys.stderr)
    if failed:
        print(f"{len(failed)} cell(s) failed completely", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = dict(fit=cmd_fit, simulate=cmd_simulate, bench=cmd_bench)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "threads"):
            args.threads = _threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sced: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"sced: parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConstantColumn, TooFewPoints, ValueError) as exc:
        print(f"sced: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
