"""Acceptance criteria at their stated tolerances, one PASS/FAIL line each.

Replicate studies checkpoint every replicate under ``.acceptance-cache`` (or
``$QALOPT_ACCEPTANCE_CACHE``), keyed by a hash of the study configuration, so
a rerun resumes instead of recomputing.  Delete the directory to start over.
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from qalopt.simgen import SimConfig, dgp_summary, generate_panel, oracle_rqal
from qalopt.simgen.onestage import OneStageConfig, one_stage_study
from qalopt.simgen.study import mc_study, preset, study_key, undersmoothing_config, undersmoothing_study

from conftest import ACCEPTANCE_LINES

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("QALOPT_ACCEPTANCE_CACHE", ROOT / ".acceptance-cache"))
REPS = 200
WORKERS = os.cpu_count() or 1
EVAL_MC_N = 20_000


def within(value, target, tol):
    return abs(value - target) <= tol


def record(number, checks, seconds):
    """Print and keep one summary line; ``checks`` maps a label to (ok, observed text)."""
    ok = all(c for c, _ in checks.values())
    detail = "; ".join(f"{label} {text} [{'ok' if c else 'MISS'}]" for label, (c, text) in checks.items())
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({seconds:.0f} s) {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok, line


def cached_study(name, cfg, methods):
    directory = CACHE / f"{name}-{study_key(cfg, methods, EVAL_MC_N)}"
    return mc_study(cfg, methods, REPS, workers=WORKERS, checkpoint_dir=directory, eval_mc_n=EVAL_MC_N)


def test_criterion_1_oracle_truths():
    checks = {}
    start = time.perf_counter()
    for K, target, tol in ((6, 21.04, 0.15), (25, 31.74, 0.20)):
        t0 = time.perf_counter()
        cfg = SimConfig(K=K)
        o = oracle_rqal(cfg, cfg.optimal_regime, mc_n=100_000)
        took = time.perf_counter() - t0
        checks[f"K={K} R"] = (within(o.value, target, tol), f"{o.value:.3f} (mc se {o.mc_se:.3f}) vs {target}±{tol}")
        checks[f"K={K} time"] = (took < 120, f"{took:.1f}s")
    ok, line = record(1, checks, time.perf_counter() - start)
    assert ok, line


def test_criterion_2_logistic_ipw_scenario_one():
    start = time.perf_counter()
    cfg, methods = preset("tableS1-logit-ipw-n500")
    row = cached_study("c2", cfg, methods).row("Logit-IPW")
    checks = {
        "reps": (row.reps >= 200, str(row.reps)),
        "mean R": (within(row.R_hat, 21.17, 0.15), f"{row.R_hat:.3f}"),
        "SD": (within(row.R_hat_sd, 0.39, 0.08), f"{row.R_hat_sd:.3f}"),
        "CP": (within(row.CP, 0.92, 0.05), f"{row.CP:.3f}"),
        "MR": (within(row.MR, 4.87, 2.0), f"{row.MR:.2f}"),
    }
    ok, line = record(2, checks, time.perf_counter() - start)
    assert ok, line


def test_criterion_3_misspecification_gap():
    start = time.perf_counter()
    cfg, hal_bc = preset("table1-hal-bc-n500")
    _, logit = preset("table1-logit-ipw-n500")
    rep = cached_study("c3", cfg, hal_bc + logit)
    hal, lg = rep.row("HAL-BC"), rep.row("Logit-IPW")
    checks = {
        "reps": (min(hal.reps, lg.reps) >= 200, f"{hal.reps}/{lg.reps}"),
        "HAL-BC mean R": (within(hal.R_hat, 20.92, 0.20), f"{hal.R_hat:.3f}"),
        "HAL-BC CP": (within(hal.CP, 0.95, 0.04), f"{hal.CP:.3f}"),
        "HAL-BC MR": (within(hal.MR, 5.79, 2.5), f"{hal.MR:.2f}"),
        "Logit-IPW CP": (within(lg.CP, 0.81, 0.06), f"{lg.CP:.3f}"),
    }
    ok, line = record(3, checks, time.perf_counter() - start)
    assert ok, line


def test_criterion_4_one_stage_propensity_study():
    start = time.perf_counter()
    rep = one_stage_study(OneStageConfig(n=500), REPS, workers=WORKERS)
    under, logit, cv = rep.row("Under-HAL"), rep.row("Logit"), rep.row("CV-HAL")
    lo, hi = sorted((logit.cp, under.cp))
    checks = {
        "reps": (min(r.reps for r in rep.rows) >= 200, str(min(r.reps for r in rep.rows))),
        "Under-HAL |bias|": (abs(under.bias) <= 0.03, f"{under.bias:.3f}"),
        "Under-HAL CP": (within(under.cp, 0.94, 0.04), f"{under.cp:.3f}"),
        "Logit bias": (within(logit.bias, 0.171, 0.04), f"{logit.bias:.3f}"),
        "Logit CP": (logit.cp <= 0.25, f"{logit.cp:.3f}"),
        "CV-HAL CP between": (lo <= cv.cp <= hi, f"{cv.cp:.3f} in [{lo:.3f}, {hi:.3f}]"),
    }
    ok, line = record(4, checks, time.perf_counter() - start)
    assert ok, line


def test_criterion_5_undersmoothing_ordering():
    start = time.perf_counter()
    rep = undersmoothing_study(undersmoothing_config(n=500), REPS, workers=WORKERS)
    under, cv = rep.row("Under-HAL").lam, rep.row("CV-HAL").lam
    frac = rep.undersmoothed_fraction()
    checks = {
        "mean penalty": (under < cv, f"{under:.4f} < {cv:.4f}"),
        "share smaller": (frac >= 0.80, f"{frac:.3f}"),
    }
    ok, line = record(5, checks, time.perf_counter() - start)
    assert ok, line


PROPERTY_SUITES = [
    "tests/test_properties.py",
    "tests/test_panel.py",
    "tests/test_estimators.py::test_brute_force_single_and_pair_panels",
    "tests/test_estimators.py::test_brute_force_every_panel_up_to_five_subjects",
    "tests/test_estimators.py::test_brute_force_smoothed_compliance",
    "tests/test_estimators.py::test_bc_converges_to_ipw",
    "tests/test_estimators.py::test_bootstrap_independent_of_workers",
    "tests/test_hazards.py::test_mean_weight_one_with_true_hazards",
    "tests/test_hazards.py::test_kkt_on_every_path_point",
    "tests/test_hazards.py::test_hal_fit_is_deterministic",
    "tests/test_optimize.py::test_recovers_synthetic_optimum",
    "tests/test_optimize.py::test_recovers_optimum_in_four_dimensions",
    "tests/test_optimize.py::test_deterministic_serial_and_threaded",
    "tests/test_simgen.py::test_panel_is_bit_identical_for_a_seed",
    "tests/test_simgen.py::test_two_replicates_serial_parallel_and_resumed",
]


def test_criterion_6_property_suites():
    start = time.perf_counter()
    done = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=ROOT, capture_output=True, text=True)
    took = time.perf_counter() - start
    summary = done.stdout.strip().splitlines()[-1] if done.stdout.strip() else done.stderr.strip()
    checks = {"suites": (done.returncode == 0, summary), "time": (took < 300, f"{took:.0f}s")}
    if done.returncode != 0:
        print(done.stdout[-4000:])
    ok, line = record(6, checks, took)
    assert ok, line


def test_criterion_7_dgp_sanity():
    start = time.perf_counter()
    s = dgp_summary(generate_panel(SimConfig(scenario=1, K=6, n=10_000, seed=20240105)))
    checks = {
        "censored": (within(s["censored"], 0.15, 0.02), f"{s['censored']:.4f}"),
        "initiated": (within(s["initiated"], 0.66, 0.03), f"{s['initiated']:.4f}"),
        "compliant": (within(s["compliant"], 0.29, 0.03), f"{s['compliant']:.4f}"),
    }
    ok, line = record(7, checks, time.perf_counter() - start)
    assert ok, line


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
