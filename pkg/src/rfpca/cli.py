"""Command-line surface: CSV ingestion, fitting, dimension selection,
diagnostics, model persistence and the simulation studies.

Input data is long-format CSV with the exact header ``id,time,value`` and one
row per observation. Fitted models round-trip through a JSON document with
full-precision floats.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import simulate as sim
from .basis import SplineBasis, build_basis
from .diagnostics import curve_diagnostics, mean_confidence_band
from .errors import CsvParseError, RfpcaError
from .model import Dataset, FitResult, ModelConfig, ModelParams, Trajectory, fit
from .selection import select_dimension

MODEL_FILE_VERSION = 1
LONG_CSV_HEADER = "id,time,value"


# ---------------------------------------------------------------------------
# Long-format CSV ingestion
# ---------------------------------------------------------------------------

def read_long_csv(path) -> list[Trajectory]:
    """Parse an id,time,value file into trajectories.

    Rows may arrive in any order; they are grouped by id (in order of first
    appearance) and sorted by time within each id.
    """
    groups: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        header = fh.readline()
        if header.rstrip("\r\n") != LONG_CSV_HEADER:
            raise CsvParseError(
                f"{path}: line 1: expected header {LONG_CSV_HEADER!r}"
            )
        reader = csv.reader(fh)
        lineno = 1
        for row in reader:
            lineno += 1
            if not row:
                continue
            if len(row) != 3:
                raise CsvParseError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            cid, time_str, value_str = row
            try:
                t, v = float(time_str), float(value_str)
            except ValueError:
                raise CsvParseError(
                    f"{path}: line {lineno}: non-numeric time or value"
                ) from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise CsvParseError(f"{path}: line {lineno}: non-finite time or value")
            groups.setdefault(cid, []).append((t, v))
    if not groups:
        raise CsvParseError(f"{path}: line 2: no data rows")
    trajectories = []
    for cid, obs in groups.items():
        obs.sort(key=lambda tv: tv[0])
        times = np.array([t for t, _ in obs])
        values = np.array([v for _, v in obs])
        trajectories.append(Trajectory(id=cid, times=times, values=values))
    return trajectories


def ingest(path, order: int = 4, num_interior_knots: int = 5, domain=None) -> Dataset:
    """Read a long CSV and attach a spline basis (domain defaults to the
    observed time range)."""
    trajectories = read_long_csv(path)
    if domain is None:
        lo = min(t.times.min() for t in trajectories)
        hi = max(t.times.max() for t in trajectories)
        domain = (float(lo), float(hi))
    basis = build_basis(order, num_interior_knots, domain)
    return Dataset(trajectories, basis)


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

def save_model(path, result: FitResult) -> None:
    params = result.params
    doc = {
        "version": MODEL_FILE_VERSION,
        "basis": params.basis.to_dict(),
        "nu": "inf" if math.isinf(params.nu) else params.nu,
        "d": params.d,
        "theta": params.theta.tolist(),
        "H": params.H.tolist(),
        "lambda": params.lam.tolist(),
        "sigma2": params.sigma2,
        "fit": {
            "loglik": float(result.loglik_trace[-1]),
            "iterations": result.iterations,
            "converged": result.converged,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path) -> tuple[ModelParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    basis = SplineBasis.from_dict(doc["basis"])
    nu = math.inf if doc["nu"] == "inf" else float(doc["nu"])
    H = np.asarray(doc["H"], dtype=float).reshape(basis.dimension, doc["d"])
    lam = np.asarray(doc["lambda"], dtype=float)
    params = ModelParams(
        theta=np.asarray(doc["theta"], dtype=float),
        xi=H * np.sqrt(lam),
        H=H,
        lam=lam,
        sigma2=float(doc["sigma2"]),
        nu=nu,
        basis=basis,
    )
    return params, doc.get("fit", {})


# ---------------------------------------------------------------------------
# Small output helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_diagnostics_csv(path, diags) -> None:
    _write_csv(
        path,
        ["id", "residual_norm", "s", "weight", "flag"],
        [
            (d.id, d.residual_norm, d.s, d.weight, int(d.outlier_flag))
            for d in diags
        ],
    )


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parse_nu(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        nu = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid nu: {text!r}") from None
    if nu <= 0:
        raise argparse.ArgumentTypeError("nu must be positive or 'inf'")
    return nu


def _parse_domain(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("domain must be 'a,b'")
    try:
        a, b = float(parts[0]), float(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError("domain must be 'a,b' with numeric bounds") from None
    return a, b


def _add_basis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--knots", type=int, default=5, help="number of interior knots (default 5)")
    p.add_argument("--order", type=int, default=4, help="spline order (default 4, cubic)")
    p.add_argument("--domain", type=_parse_domain, default=None,
                   help="basis domain 'a,b' (default: observed time range)")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nu", type=_parse_nu, default=1.0,
                   help="t degrees of freedom, or 'inf' for the Normal model (default 1)")
    p.add_argument("--penalty", type=float, default=0.0,
                   help="roughness penalty applied to mean and components (default 0)")
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfpca",
        description="Robust functional principal components for sparse longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write model.json + diagnostics.csv")
    p_fit.add_argument("--data", required=True, help="long-format CSV (id,time,value)")
    p_fit.add_argument("--dim", type=int, default=0, help="number of components (default 0)")
    _add_basis_flags(p_fit)
    _add_fit_flags(p_fit)
    p_fit.add_argument("--out", default=".", help="output directory")

    p_sel = sub.add_parser("select", help="choose the model dimension; writes selection.json")
    p_sel.add_argument("--data", required=True)
    p_sel.add_argument("--dmax", type=int, default=4, help="largest dimension to consider")
    p_sel.add_argument("--criterion", choices=["aic", "bic", "cv"], default="bic")
    _add_basis_flags(p_sel)
    _add_fit_flags(p_sel)
    p_sel.add_argument("--out", default=".")

    p_diag = sub.add_parser("diagnose", help="score curves against a saved model; writes band.csv + outliers.csv")
    p_diag.add_argument("--data", required=True)
    p_diag.add_argument("--model", required=True, help="model.json from a previous fit")
    p_diag.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p_diag.add_argument("--grid", type=int, default=201, help="evaluation grid size (default 201)")
    p_diag.add_argument("--out", default=".")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study; writes a tidy CSV")
    group = p_sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--table", type=int, choices=[1, 2],
                       help="canonical study: 1 = estimator RMSEs, 2 = dimension selection")
    group.add_argument("--study", help="JSON study configuration file")
    p_sim.add_argument("--reps", type=int, default=200)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", default=".")

    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    data = ingest(args.data, args.order, args.knots, args.domain)
    config = ModelConfig(
        nu=args.nu, d=args.dim, mean_penalty=args.penalty,
        component_penalties=args.penalty, max_iter=args.max_iter,
        tol=args.tol, seed=args.seed,
    )
    result = fit(data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.json", result)
    _write_diagnostics_csv(out / "diagnostics.csv", curve_diagnostics(result, data))
    return 0 if result.converged else 2


def cmd_select(args) -> int:
    data = ingest(args.data, args.order, args.knots, args.domain)
    config = ModelConfig(
        nu=args.nu, d=args.dmax, mean_penalty=args.penalty,
        component_penalties=args.penalty, max_iter=args.max_iter,
        tol=args.tol, seed=args.seed,
    )
    report = select_dimension(data, args.dmax, args.criterion, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "selection.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    return 0 if all(row["converged"] for row in report.per_d) else 2


def cmd_diagnose(args) -> int:
    params, _ = load_model(args.model)
    trajectories = read_long_csv(args.data)
    try:
        data = Dataset(trajectories, params.basis)
    except ValueError as exc:
        raise RfpcaError(f"data incompatible with the saved model basis: {exc}") from exc
    shim = FitResult(
        params=params,
        loglik_trace=np.array([0.0]),
        converged=True,
        iterations=0,
        per_curve=[],
    )
    a, b = params.basis.domain
    grid = np.linspace(a, b, args.grid)
    band = mean_confidence_band(shim, data, grid, args.level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lower = band.band_center - band.band_half_width
    upper = band.band_center + band.band_half_width
    _write_csv(
        out / "band.csv",
        ["t", "center", "lower", "upper"],
        zip(band.band_grid, band.band_center, lower, upper),
    )
    _write_diagnostics_csv(out / "outliers.csv", curve_diagnostics(shim, data))
    return 0


def _study_from_json(path, reps: int, seed: int) -> list[tuple[str, sim.MonteCarloStudy]]:
    with open(path) as fh:
        doc = json.load(fh)
    scenarios = tuple(
        sim.StudyScenario(
            name=s["name"],
            contamination=sim.Contamination(
                kind=s.get("kind", "none"),
                epsilon=s.get("epsilon", 0.0),
                K=s.get("K", 4.0),
                literal_scores=s.get("literal_scores", False),
            ),
        )
        for s in doc["scenarios"]
    )
    estimators = tuple(math.inf if e == "inf" else float(e) for e in doc["estimators"])
    study = sim.MonteCarloStudy(
        mode=doc["mode"],
        scenarios=scenarios,
        n=doc.get("n", 100),
        reps=doc.get("reps", reps),
        estimators=estimators,
        seed=doc.get("seed", seed),
        d_max=doc.get("d_max", 4),
    )
    return [("study", study)]


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.study:
        runs = _study_from_json(args.study, args.reps, args.seed)
        result = sim.monte_carlo(runs[0][1])
        result.to_csv(out / "study.csv")
        return 0
    if args.table == 1:
        result = sim.monte_carlo(sim.efficiency_study(reps=args.reps, seed=args.seed))
        result.to_csv(out / "table1.csv")
        return 0
    rows = []
    for n in (20, 60):
        result = sim.monte_carlo(sim.selection_study(reps=args.reps, seed=args.seed, n=n))
        for row in result.rows:
            rows.append({"n": n, **row})
    sim.StudyResult(mode="selection", rows=tuple(rows)).to_csv(out / "table2.csv")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": cmd_fit,
        "select": cmd_select,
        "diagnose": cmd_diagnose,
        "simulate": cmd_simulate,
    }
    try:
        return handlers[args.command](args)
    except RfpcaError as exc:
        print(f"rfpca: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"rfpca: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
