"""Synthetic data generation and the Monte Carlo study harness.

The default generator draws curves from a two-component model with sine
components on [0, 1], Gaussian scores and noise, on one of three time-grid
designs (fixed uniform, random uniform, Poisson-count random). Contaminated
variants replace component scores with large constants (endogenous outliers)
or add multiples of a normalized Doppler function, which lies outside the
span of the true components (exogenous outliers).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache, partial

import numpy as np
from scipy.integrate import quad, simpson

from .basis import SplineBasis, build_basis
from .errors import RfpcaError
from .model import Dataset, FitResult, ModelConfig, Trajectory, fit, log_likelihood
from .selection import degrees_of_freedom

ERROR_NORM_GRID = 401  # composite-Simpson grid for L2 error norms

CONTAMINATION_KINDS = (
    "none",
    "endogenous_mean",
    "exogenous_mean",
    "endogenous_pc",
    "exogenous_pc",
)


# ---------------------------------------------------------------------------
# The true model and its ingredients
# ---------------------------------------------------------------------------

def _zero_mean(t):
    return np.zeros_like(np.asarray(t, dtype=float))


def _sine_component(k: int, t):
    return math.sqrt(2.0) * np.sin(k * math.pi * np.asarray(t, dtype=float))


_DOPPLER_SHIFT = 2.0 ** (-11.0 / 5.0)  # 2^((9-4k)/5) at k=5


def _doppler_raw(t):
    t = np.asarray(t, dtype=float)
    envelope = np.sqrt(np.maximum(t * (1.0 - t), 0.0))
    return envelope * np.sin(
        2.0 * math.pi * (1.0 + _DOPPLER_SHIFT) / (t + _DOPPLER_SHIFT)
    )


@lru_cache(maxsize=1)
def _doppler_scale() -> float:
    integral, _ = quad(lambda u: float(_doppler_raw(u) ** 2), 0.0, 1.0, limit=200)
    return 1.0 / math.sqrt(integral)


def _doppler_unit(t):
    return _doppler_scale() * _doppler_raw(t)


def doppler_phi3():
    """Unit-norm Doppler function used as the exogenous outlier direction."""
    _doppler_scale()  # normalize once up front
    return _doppler_unit


@dataclass(frozen=True)
class TrueModel:
    """Data-generating process: mean, components, variances, noise."""

    mu: object = _zero_mean
    phis: tuple = (partial(_sine_component, 1), partial(_sine_component, 2))
    lambdas: tuple = (1.0, 0.5)
    sigma2: float = 0.25
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if len(self.phis) != len(self.lambdas):
            raise ValueError("phis and lambdas must have equal length")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")


@dataclass(frozen=True)
class GridDesign:
    """Observation-time design; one of fixed_uniform, random_uniform,
    poisson_uniform."""

    kind: str
    m: int = 20
    mean_count: float = 15.0

    def __post_init__(self):
        if self.kind not in ("fixed_uniform", "random_uniform", "poisson_uniform"):
            raise ValueError(f"unknown grid design {self.kind!r}")
        if self.kind != "poisson_uniform" and self.m < 2:
            raise ValueError("m must be >= 2")
        if self.kind == "poisson_uniform" and self.mean_count <= 0:
            raise ValueError("mean_count must be positive")

    @classmethod
    def fixed_uniform(cls, m: int = 20) -> "GridDesign":
        return cls("fixed_uniform", m=m)

    @classmethod
    def random_uniform(cls, m: int = 20) -> "GridDesign":
        return cls("random_uniform", m=m)

    @classmethod
    def poisson_uniform(cls, mean_count: float = 15.0) -> "GridDesign":
        return cls("poisson_uniform", mean_count=mean_count)

    def sample(self, rng: np.random.Generator, n: int, domain) -> list[np.ndarray]:
        a, b = domain
        if self.kind == "fixed_uniform":
            grid = np.linspace(a, b, self.m)
            return [grid.copy() for _ in range(n)]
        if self.kind == "random_uniform":
            return [np.sort(rng.uniform(a, b, self.m)) for _ in range(n)]
        grids = []
        for _ in range(n):
            m_i = rng.poisson(self.mean_count)
            while m_i < 2:  # redraw rare tiny counts so every curve is usable
                m_i = rng.poisson(self.mean_count)
            grids.append(np.sort(rng.uniform(a, b, m_i)))
        return grids


@dataclass(frozen=True)
class Contamination:
    """Outlier recipe applied to round(epsilon * n) curves.

    ``endogenous_*`` kinds alter component scores; ``exogenous_*`` kinds add
    multiples of the Doppler direction. The ``*_pc`` kinds split the affected
    curves into +/- halves so the sample mean is untouched in expectation.

    The default endogenous_pc recipe turns the affected curves into pure
    second-direction outliers, z = (0, +/-K*sqrt(lambda2)), so the
    contaminated second-component variance is
    (1-eps)*lambda2 + eps*K^2*lambda2^2 and the first drops to
    (1-eps)*lambda1. ``literal_scores`` switches to the alternative reading
    that only replaces the second score by +/-K*sqrt(lambda2), leaving the
    first score untouched.
    """

    kind: str = "none"
    epsilon: float = 0.0
    K: float = 4.0
    literal_scores: bool = False

    def __post_init__(self):
        if self.kind not in CONTAMINATION_KINDS:
            raise ValueError(f"unknown contamination kind {self.kind!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must be in [0, 1)")

    @classmethod
    def none(cls) -> "Contamination":
        return cls()


@dataclass(frozen=True)
class SimulationRecord:
    """What the generator actually did: final scores and affected curves."""

    seed: int
    z: np.ndarray
    contaminated: np.ndarray
    plus: np.ndarray
    minus: np.ndarray


def simulate_dataset(
    truth: TrueModel,
    design: GridDesign,
    n: int,
    contamination: Contamination,
    seed: int,
    basis: SplineBasis | None = None,
) -> tuple[Dataset, SimulationRecord]:
    """Draw n curves from the true model, apply one contamination recipe.

    Fully deterministic given the seed; the contamination draws come after
    the base draws, so epsilon = 0 reproduces the clean dataset bit for bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    grids = design.sample(rng, n, truth.domain)
    n_comp = len(truth.lambdas)
    z = rng.standard_normal((n, n_comp))
    noise = [rng.standard_normal(g.size) for g in grids]

    n_bad = int(round(contamination.epsilon * n))
    selected = rng.permutation(n)[:n_bad] if contamination.kind != "none" else np.array([], dtype=int)
    plus = selected[: n_bad // 2]
    minus = selected[n_bad // 2 :]
    K = contamination.K
    lambdas = np.asarray(truth.lambdas, dtype=float)

    if contamination.kind == "endogenous_mean":
        z[selected, 0] = K
    elif contamination.kind == "endogenous_pc":
        level = K * math.sqrt(lambdas[1])
        if not contamination.literal_scores:
            z[selected, :] = 0.0
        z[plus, 1] = level
        z[minus, 1] = -level

    sigma = math.sqrt(truth.sigma2)
    sq_lam = np.sqrt(lambdas)
    trajectories = []
    for i, times in enumerate(grids):
        x = truth.mu(times) + sigma * noise[i]
        for k in range(n_comp):
            x = x + z[i, k] * sq_lam[k] * truth.phis[k](times)
        trajectories.append(Trajectory(id=f"curve{i:04d}", times=times, values=x))

    if contamination.kind in ("exogenous_mean", "exogenous_pc"):
        phi3 = doppler_phi3()
        shift = K * math.sqrt(lambdas[0]) if n_comp else K
        add_plus = selected if contamination.kind == "exogenous_mean" else plus
        for i in add_plus:
            t = trajectories[i]
            trajectories[i] = Trajectory(t.id, t.times, t.values + shift * phi3(t.times))
        if contamination.kind == "exogenous_pc":
            for i in minus:
                t = trajectories[i]
                trajectories[i] = Trajectory(t.id, t.times, t.values - shift * phi3(t.times))

    if basis is None:
        basis = build_basis(4, 5, truth.domain)
    record = SimulationRecord(
        seed=seed, z=z, contaminated=np.sort(selected),
        plus=np.sort(plus), minus=np.sort(minus),
    )
    return Dataset(trajectories, basis), record


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------

def l2_error(fhat, f, domain=(0.0, 1.0), sign_align: bool = False) -> float:
    """L2 distance between two functions by composite Simpson quadrature.

    With ``sign_align`` the sign of ``fhat`` is chosen to minimize the
    distance, as appropriate for component functions that are only identified
    up to sign.
    """
    grid = np.linspace(domain[0], domain[1], ERROR_NORM_GRID)
    fh = np.asarray(fhat(grid), dtype=float)
    fv = np.asarray(f(grid), dtype=float)
    direct = float(simpson((fh - fv) ** 2, x=grid))
    if sign_align:
        flipped = float(simpson((fh + fv) ** 2, x=grid))
        direct = min(direct, flipped)
    return math.sqrt(max(direct, 0.0))


def error_norms(fit_result: FitResult, truth: TrueModel) -> dict:
    """L2 errors of the fitted mean and (sign-aligned) leading component."""
    params = fit_result.params
    if params.basis.domain != tuple(truth.domain):
        raise ValueError("fit domain differs from truth domain")
    out = {"mu_err": l2_error(lambda t: params.mean(t), truth.mu, truth.domain)}
    if params.d >= 1 and truth.phis:
        out["phi1_err"] = l2_error(
            lambda t: params.components(t)[:, 0],
            truth.phis[0],
            truth.domain,
            sign_align=True,
        )
    else:
        out["phi1_err"] = None
    return out


# ---------------------------------------------------------------------------
# Monte Carlo studies
# ---------------------------------------------------------------------------

def estimator_label(nu: float) -> str:
    if math.isinf(nu):
        return "normal"
    if nu == 1:
        return "cauchy"
    return f"t{nu:g}"


@dataclass(frozen=True)
class StudyScenario:
    name: str
    contamination: Contamination


@dataclass(frozen=True)
class MonteCarloStudy:
    """Configuration of a replicated simulation experiment.

    ``mode='estimation'`` reproduces root-mean-square error tables for the
    mean (fitted at d=0) and leading component (fitted at d=1).
    ``mode='selection'`` tallies how often each criterion picks each
    dimension over sequential fits up to ``d_max``.
    """

    mode: str
    scenarios: tuple
    n: int = 100
    reps: int = 200
    estimators: tuple = (math.inf, 1.0, 5.0)
    seed: int = 0
    design: GridDesign = field(default_factory=GridDesign.random_uniform)
    truth: TrueModel = field(default_factory=TrueModel)
    d_max: int = 4
    criteria: tuple = ("aic", "bic")
    basis_order: int = 4
    basis_knots: int = 5
    max_iter: int = 2000
    # Classical EM stopping for study fits. Estimator sampling noise swamps
    # optimization error at this level, and on borderline contaminated draws
    # a much deeper optimization would ride the likelihood into a degenerate
    # optimum that models the outliers as a pseudo-component.
    tol: float = 1e-4

    def __post_init__(self):
        if self.mode not in ("estimation", "selection"):
            raise ValueError(f"unknown study mode {self.mode!r}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass(frozen=True)
class StudyResult:
    mode: str
    rows: tuple[dict, ...]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if not self.rows:
                return
            header = list(self.rows[0].keys())
            writer.writerow(header)
            for row in self.rows:
                writer.writerow([_csv_cell(row[k]) for k in header])


def _csv_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def _study_basis(study: MonteCarloStudy) -> SplineBasis:
    return build_basis(study.basis_order, study.basis_knots, study.truth.domain)


def _estimation_rep(study: MonteCarloStudy, rep: int) -> list[dict]:
    basis = _study_basis(study)
    out = []
    for scen in study.scenarios:
        data, _ = simulate_dataset(
            study.truth, study.design, study.n, scen.contamination,
            seed=study.seed + rep, basis=basis,
        )
        for nu in study.estimators:
            config = ModelConfig(nu=nu, d=1, max_iter=study.max_iter, tol=study.tol)
            try:
                result = fit(data, config)
                stage0, stage1 = result.stages[0], result.stages[1]
                out.append({
                    "scenario": scen.name,
                    "nu": nu,
                    "mu_err": error_norms(stage0, study.truth)["mu_err"],
                    "mu_ok": stage0.converged,
                    "phi1_err": error_norms(stage1, study.truth)["phi1_err"],
                    "phi1_ok": stage1.converged,
                })
            except RfpcaError:
                out.append({
                    "scenario": scen.name, "nu": nu,
                    "mu_err": np.nan, "mu_ok": False,
                    "phi1_err": np.nan, "phi1_ok": False,
                })
    return out


def _selection_rep(study: MonteCarloStudy, rep: int) -> list[dict]:
    basis = _study_basis(study)
    c_bic = math.log(study.n) / 2.0
    out = []
    for scen in study.scenarios:
        data, _ = simulate_dataset(
            study.truth, study.design, study.n, scen.contamination,
            seed=study.seed + rep, basis=basis,
        )
        p = basis.dimension
        for nu in study.estimators:
            config = ModelConfig(nu=nu, d=study.d_max, max_iter=study.max_iter, tol=study.tol)
            try:
                chain = fit(data, config)
                ok = all(stage.converged for stage in chain.stages)
                lls = [log_likelihood(stage.params, data) for stage in chain.stages]
                dfs = [degrees_of_freedom(p, d) for d in range(study.d_max + 1)]
                for criterion in study.criteria:
                    c_n = 1.0 if criterion == "aic" else c_bic
                    scores = [ll - c_n * df for ll, df in zip(lls, dfs)]
                    out.append({
                        "scenario": scen.name, "nu": nu, "criterion": criterion,
                        "chosen_d": int(np.argmax(scores)), "ok": ok,
                    })
            except RfpcaError:
                for criterion in study.criteria:
                    out.append({
                        "scenario": scen.name, "nu": nu, "criterion": criterion,
                        "chosen_d": None, "ok": False,
                    })
    return out


def _worker_count(reps: int) -> int:
    cap = int(os.environ.get("RFPCA_THREADS", "1"))
    return max(1, min(cap, reps))


def _map_reps(func, study: MonteCarloStudy):
    workers = _worker_count(study.reps)
    reps = range(study.reps)
    if workers == 1:
        return [func(study, rep) for rep in reps]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(partial(func, study), reps, chunksize=8))


def _rms_and_se(errors: np.ndarray) -> tuple[float, float]:
    sq = errors**2
    mean_sq = float(sq.mean())
    rms = math.sqrt(mean_sq)
    if sq.size < 2 or rms == 0.0:
        return rms, 0.0
    se_mean_sq = float(sq.std(ddof=1)) / math.sqrt(sq.size)
    return rms, se_mean_sq / (2.0 * rms)


def monte_carlo(study: MonteCarloStudy) -> StudyResult:
    """Run the configured study; deterministic given its seed.

    Per-replication seeds are ``seed + rep``, so results do not depend on
    execution order and replications can run in a worker pool (size capped
    by the RFPCA_THREADS environment variable).
    """
    if study.mode == "estimation":
        per_rep = _map_reps(_estimation_rep, study)
        rows = []
        for scen in study.scenarios:
            for nu in study.estimators:
                cell = [
                    r
                    for rep_rows in per_rep
                    for r in rep_rows
                    if r["scenario"] == scen.name and r["nu"] == nu
                ]
                for metric, ok_key in (("mu_err", "mu_ok"), ("phi1_err", "phi1_ok")):
                    vals = np.array([r[metric] for r in cell if r[ok_key]])
                    excluded = sum(1 for r in cell if not r[ok_key])
                    rms, se = _rms_and_se(vals) if vals.size else (np.nan, np.nan)
                    rows.append({
                        "estimator": estimator_label(nu),
                        "scenario": scen.name,
                        "metric": {"mu_err": "rmse_mu", "phi1_err": "rmse_phi1"}[metric],
                        "value": rms,
                        "mc_se": se,
                        "reps_used": int(vals.size),
                        "reps_excluded": int(excluded),
                    })
        return StudyResult(mode="estimation", rows=tuple(rows))

    per_rep = _map_reps(_selection_rep, study)
    rows = []
    for scen in study.scenarios:
        for nu in study.estimators:
            for criterion in study.criteria:
                cell = [
                    r
                    for rep_rows in per_rep
                    for r in rep_rows
                    if r["scenario"] == scen.name
                    and r["nu"] == nu
                    and r["criterion"] == criterion
                ]
                good = [r for r in cell if r["ok"]]
                excluded = len(cell) - len(good)
                counts = np.zeros(study.d_max + 1, dtype=int)
                for r in good:
                    counts[r["chosen_d"]] += 1
                for d in range(study.d_max + 1):
                    pct = 100.0 * int(counts[d]) / len(good) if good else np.nan
                    rows.append({
                        "estimator": estimator_label(nu),
                        "criterion": criterion,
                        "scenario": scen.name,
                        "d": d,
                        "percent": pct,
                        "reps_used": len(good),
                        "reps_excluded": excluded,
                    })
    return StudyResult(mode="selection", rows=tuple(rows))


# ---------------------------------------------------------------------------
# Canonical study configurations
# ---------------------------------------------------------------------------

def efficiency_scenarios(K: float = 4.0) -> tuple:
    """Clean data plus all four contamination recipes at 10/20/30 percent."""
    scens = [StudyScenario("clean", Contamination.none())]
    for kind, tag in (
        ("endogenous_mean", "endo_mean"),
        ("exogenous_mean", "exo_mean"),
        ("endogenous_pc", "endo_pc"),
        ("exogenous_pc", "exo_pc"),
    ):
        for eps in (0.10, 0.20, 0.30):
            scens.append(
                StudyScenario(f"{tag}_{int(eps * 100)}", Contamination(kind, eps, K))
            )
    return tuple(scens)


def selection_scenarios(K: float = 4.0) -> tuple:
    scens = [StudyScenario("clean", Contamination.none())]
    for eps in (0.10, 0.20, 0.30):
        scens.append(
            StudyScenario(
                f"exo_pc_{int(eps * 100)}", Contamination("exogenous_pc", eps, K)
            )
        )
    return tuple(scens)


def efficiency_study(reps: int = 200, seed: int = 0, n: int = 100, K: float = 4.0) -> MonteCarloStudy:
    return MonteCarloStudy(
        mode="estimation",
        scenarios=efficiency_scenarios(K),
        n=n,
        reps=reps,
        estimators=(math.inf, 1.0, 5.0),
        seed=seed,
    )


def selection_study(reps: int = 200, seed: int = 0, n: int = 60, K: float = 4.0) -> MonteCarloStudy:
    return MonteCarloStudy(
        mode="selection",
        scenarios=selection_scenarios(K),
        n=n,
        reps=reps,
        estimators=(math.inf, 1.0),
        seed=seed,
    )
