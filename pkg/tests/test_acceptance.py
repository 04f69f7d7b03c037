"""Acceptance suite.

Each test prints one PASS/FAIL line (run with ``pytest -v -s``). Monte Carlo
checks use 200 replications with a fixed seed, so their outcomes are
deterministic. The whole module is budgeted to run in a few minutes.
"""

import math
import sys

import numpy as np
import pytest

from rfpca import (
    ModelConfig,
    Dataset,
    Trajectory,
    build_basis,
    degrees_of_freedom,
    estimating_equation_residuals,
    fit,
    mean_confidence_band,
    sigma_solve,
    simulate_dataset,
)
from rfpca.simulate import (
    Contamination,
    GridDesign,
    MonteCarloStudy,
    StudyScenario,
    TrueModel,
    doppler_phi3,
    l2_error,
    monte_carlo,
)
from oracles import dense_covariance, random_params


SEED = 0
REPS = 200


def _report(name: str, ok: bool, detail: str) -> bool:
    # written to the real stdout so the line survives pytest's capture
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})", file=sys.__stdout__)
    return ok


@pytest.fixture(scope="module")
def estimation_rows():
    study = MonteCarloStudy(
        mode="estimation",
        scenarios=(
            StudyScenario("clean", Contamination.none()),
            StudyScenario("exo_mean_10", Contamination("exogenous_mean", 0.10, 4.0)),
            StudyScenario("endo_mean_30", Contamination("endogenous_mean", 0.30, 4.0)),
            StudyScenario("endo_pc_20", Contamination("endogenous_pc", 0.20, 4.0)),
            StudyScenario("exo_pc_20", Contamination("exogenous_pc", 0.20, 4.0)),
        ),
        n=100,
        reps=REPS,
        estimators=(math.inf, 1.0, 5.0),
        seed=SEED,
    )
    result = monte_carlo(study)
    return {
        (row["estimator"], row["scenario"], row["metric"]): row["value"]
        for row in result.rows
    }


@pytest.fixture(scope="module")
def selection_rows():
    study = MonteCarloStudy(
        mode="selection",
        scenarios=(
            StudyScenario("clean", Contamination.none()),
            StudyScenario("exo_pc_10", Contamination("exogenous_pc", 0.10, 4.0)),
        ),
        n=60,
        reps=REPS,
        estimators=(math.inf, 1.0),
        seed=SEED,
        d_max=4,
        criteria=("bic",),
    )
    result = monte_carlo(study)
    return {
        (row["estimator"], row["scenario"], row["d"]): row["percent"]
        for row in result.rows
    }


def test_criterion_1_clean_efficiency(estimation_rows):
    targets = {
        ("normal", "rmse_mu"): 0.142,
        ("cauchy", "rmse_mu"): 0.169,
        ("t5", "rmse_mu"): 0.159,
        ("normal", "rmse_phi1"): 0.142,
        ("cauchy", "rmse_phi1"): 0.165,
        ("t5", "rmse_phi1"): 0.163,
    }
    deviations = {
        key: estimation_rows[(key[0], "clean", key[1])] - ref
        for key, ref in targets.items()
    }
    ok = all(abs(dev) <= 0.03 for dev in deviations.values())
    detail = ", ".join(
        f"{e}/{m}: {estimation_rows[(e, 'clean', m)]:.3f} vs {ref:.3f}"
        for (e, m), ref in targets.items()
    )
    assert _report("1 clean-data efficiency", ok, detail)


def test_criterion_2_mean_contamination(estimation_rows):
    exo_n = estimation_rows[("normal", "exo_mean_10", "rmse_mu")]
    exo_c = estimation_rows[("cauchy", "exo_mean_10", "rmse_mu")]
    endo_n = estimation_rows[("normal", "endo_mean_30", "rmse_mu")]
    endo_c = estimation_rows[("cauchy", "endo_mean_30", "rmse_mu")]
    ok = (
        0.30 <= exo_n <= 0.45
        and exo_c <= 0.22
        and 1.05 <= endo_n <= 1.35
        and endo_c <= 0.45
    )
    detail = (
        f"exo10: normal {exo_n:.3f} in [0.30,0.45], cauchy {exo_c:.3f} <= 0.22; "
        f"endo30: normal {endo_n:.3f} in [1.05,1.35], cauchy {endo_c:.3f} <= 0.45"
    )
    assert _report("2 mean contamination", ok, detail)


def test_criterion_3_component_contamination(estimation_rows):
    endo_n = estimation_rows[("normal", "endo_pc_20", "rmse_phi1")]
    endo_c = estimation_rows[("cauchy", "endo_pc_20", "rmse_phi1")]
    exo_c = estimation_rows[("cauchy", "exo_pc_20", "rmse_phi1")]
    ok = endo_n >= 1.2 and endo_c <= 0.80 and exo_c <= 0.30
    detail = (
        f"endo20: normal {endo_n:.3f} >= 1.2, cauchy {endo_c:.3f} <= 0.80; "
        f"exo20: cauchy {exo_c:.3f} <= 0.30"
    )
    assert _report("3 component contamination", ok, detail)


def test_criterion_4_selection(selection_rows):
    clean_cau = selection_rows[("cauchy", "clean", 2)]
    exo_cau = selection_rows[("cauchy", "exo_pc_10", 2)]
    exo_nor = selection_rows[("normal", "exo_pc_10", 2)]
    ok = clean_cau >= 97.0 and exo_cau >= 75.0 and exo_nor <= 10.0
    detail = (
        f"clean BIC-Cauchy d=2: {clean_cau:.1f}% >= 97; "
        f"exo10 BIC-Cauchy d=2: {exo_cau:.1f}% >= 75; "
        f"exo10 BIC-Normal d=2: {exo_nor:.1f}% <= 10"
    )
    assert _report("4 dimension selection", ok, detail)


def test_criterion_5_degrees_of_freedom():
    ok = degrees_of_freedom(9, 2) == 27
    assert _report("5 degrees of freedom", ok, f"df(9,2) = {degrees_of_freedom(9, 2)}")


def test_criterion_6_em_ascent():
    rng = np.random.default_rng(SEED)
    violations = 0
    for k in range(100):
        m = int(rng.integers(3, 11))
        d = int(rng.integers(0, 3))
        nu = (1.0, 5.0)[k % 2]
        data, _ = simulate_dataset(
            TrueModel(), GridDesign.random_uniform(m), 20, Contamination.none(),
            seed=SEED + 1000 + k,
        )
        res = fit(data, ModelConfig(nu=nu, d=d, max_iter=200))
        for stage in res.stages:
            if np.any(np.diff(stage.loglik_trace) < -1e-8):
                violations += 1
    ok = violations == 0
    assert _report("6 EM ascent", ok, f"{violations} violations on 100 datasets")


def test_criterion_7_fixed_point():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for k in range(20):
        n = int(rng.integers(20, 41))
        m = int(rng.integers(8, 21))
        d = int(rng.integers(1, 3))
        nu = (1.0, 5.0, math.inf)[k % 3]
        data, _ = simulate_dataset(
            TrueModel(), GridDesign.random_uniform(m), n, Contamination.none(),
            seed=SEED + 2000 + k,
        )
        res = fit(
            data,
            ModelConfig(nu=nu, d=d, tol=1e-10, max_iter=100000, deep_convergence=True),
        )
        worst = max(worst, estimating_equation_residuals(res.params, data).max())
    ok = worst < 1e-5
    assert _report("7 fixed-point residuals", ok, f"max norm {worst:.2e} < 1e-5")


def test_criterion_8_woodbury():
    rng = np.random.default_rng(SEED)
    basis = build_basis(4, 5, (0, 1))
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(0, 5))
        m = int(rng.integers(1, 51))
        params = random_params(rng, basis, d=d, sigma2=float(rng.uniform(0.05, 2.0)))
        B = basis.design_matrix(rng.uniform(0, 1, m))
        rhs = rng.normal(size=m)
        sol, logdet = sigma_solve(params, B, rhs)
        sigma = dense_covariance(params, B)
        ref = np.linalg.solve(sigma, rhs)
        err = np.linalg.norm(sol - ref) / max(np.linalg.norm(ref), 1e-300)
        err = max(err, abs(logdet - np.linalg.slogdet(sigma)[1]) / max(abs(logdet), 1.0))
        worst = max(worst, err)
    ok = worst < 1e-10
    assert _report("8 Woodbury oracle", ok, f"max relative error {worst:.2e} over 500")


def test_criterion_9_influence_boundedness():
    rng = np.random.default_rng(SEED)
    base, _ = simulate_dataset(
        TrueModel(), GridDesign.random_uniform(20), 100, Contamination.none(), seed=SEED
    )
    phi3 = doppler_phi3()
    t_out = np.sort(rng.uniform(0, 1, 20))
    base_curve = 0.5 * rng.standard_normal(20)
    shifts = {}
    for nu in (1.0, math.inf):
        clean_mean = fit(base, ModelConfig(nu=nu, d=0)).params
        shifts[nu] = []
        for K in (4, 8, 16, 32):
            out = Trajectory("outlier", t_out, base_curve + K * phi3(t_out))
            data = Dataset(list(base.trajectories) + [out], base.basis)
            mean_k = fit(data, ModelConfig(nu=nu, d=0)).params
            shifts[nu].append(
                l2_error(lambda t: mean_k.mean(t), lambda t: clean_mean.mean(t))
            )
    cauchy, normal = shifts[1.0], shifts[math.inf]
    ok = cauchy[3] <= 2 * cauchy[0] and normal[3] >= 5 * cauchy[3]
    detail = (
        f"cauchy K=4..32: {np.round(cauchy, 4).tolist()}; "
        f"normal K=32: {normal[3]:.4f} >= 5x cauchy K=32"
    )
    assert _report("9 influence boundedness", ok, detail)


def test_criterion_10_ratio_consistency():
    hits = 0
    for rep in range(50):
        data, _ = simulate_dataset(
            TrueModel(), GridDesign.random_uniform(20), 400, Contamination.none(),
            seed=SEED + 3000 + rep,
        )
        res = fit(data, ModelConfig(nu=1.0, d=2))
        ratio = res.params.lam[0] / res.params.lam[1]
        hits += 1.6 <= ratio <= 2.4
    ok = hits >= 45  # 90% of 50
    assert _report("10 ratio consistency", ok, f"{hits}/50 in [1.6, 2.4]")


def test_criterion_11_band_coverage():
    truth = TrueModel(phis=(), lambdas=(), sigma2=0.25)
    hits = 0
    reps = 300
    for rep in range(reps):
        data, _ = simulate_dataset(
            truth, GridDesign.random_uniform(20), 200, Contamination.none(),
            seed=SEED + 4000 + rep,
        )
        res = fit(data, ModelConfig(nu=math.inf, d=0))
        band = mean_confidence_band(res, data, np.array([0.5]), 0.95)
        lo = band.band_center[0] - band.band_half_width[0]
        hi = band.band_center[0] + band.band_half_width[0]
        hits += lo <= 0.0 <= hi
    coverage = hits / reps
    ok = 0.91 <= coverage <= 0.98
    assert _report("11 band coverage", ok, f"coverage {coverage:.3f} in [0.91, 0.98]")
