import json
import math

import numpy as np
import pytest

from qalopt.hazards import (CENSORING, TREATMENT, FeatureSpec, HalModel, HazardFit, LogisticModel, NuisanceFits,
                            NuisanceRecipe, SeparationError, build_risk_rows, cumulative_factors,
                            cumulative_weights, enumerate_basis, fit_hal_path, fit_hazards, fit_logistic,
                            kkt_violation, lambda_floor, predict_hazard, score_diagnostic, select_undersmoothed,
                            undersmooth_score)
from qalopt.hazards.fit import EPS
from qalopt.hazards.hal import informative_columns, lambda_max, solve_path
from qalopt.panel import derive_targets
from qalopt.regimes import Regime, cumulative_compliance, landmark_scores, regime_design
from qalopt.simgen import SimConfig, TruthHazards, generate_panel

from conftest import make_panel, make_traj

LM3 = [0, 10, 20]


def toy_panel():
    # subject 0: treated at j=1, event at 25; subject 1: censored at 15; subject 2: event at 5
    trajs = [
        make_traj(LM3, [1, 1, 1], T=25, a=[0, 1, 1], z=[0.1, 0.2, 0.3], sid=0),
        make_traj(LM3, [1, 1, 1], T=30, C=15, a=[0, 0, 0], z=[0.4, 0.5, 0.6], sid=1),
        make_traj(LM3, [1, 1, 1], T=5, a=[0, 0, 0], z=[0.7, 0.8, 0.9], sid=2),
    ]
    return make_panel(trajs, LM3)


# ---------------------------------------------------------------------------
# risk sets


def test_risk_rows_match_hand_enumeration():
    p = toy_panel()
    spec = FeatureSpec(("z1",), stage_degree=0)
    tr = build_risk_rows(p, TREATMENT, spec)
    # subject 0 at j=1 only (treated afterwards); subject 1 at j=1 (exits at 15)
    assert sorted(zip(tr.subject.tolist(), tr.stage.tolist())) == [(0, 1), (1, 1)]
    assert tr.response.tolist() == [1.0, 0.0]
    ce = build_risk_rows(p, CENSORING, spec)
    assert sorted(zip(ce.subject.tolist(), ce.stage.tolist())) == [(0, 1), (0, 2), (1, 1)]
    assert dict(zip(zip(ce.subject.tolist(), ce.stage.tolist()), ce.response.tolist())) == {
        (0, 1): 0.0, (0, 2): 0.0, (1, 1): 1.0}


def test_feature_spec_stage_terms():
    p = toy_panel()
    spec = FeatureSpec(("z1",), stage_degree=2, include_treatment=True)
    assert spec.names == ["stage", "stage^2", "z1", "a"]
    X = spec.matrix(p, np.array([0]), np.array([1]))
    np.testing.assert_allclose(X, [[0.5, 0.25, 0.2, 1.0]])


# ---------------------------------------------------------------------------
# logistic


def test_logistic_recovers_truth_at_large_n():
    rng = np.random.default_rng(20240101)
    n = 100_000
    Z = rng.normal(size=(n, 2))
    y = (rng.random(n) < 1 / (1 + np.exp(-(0.5 - 0.5 * Z[:, 0] - 0.5 * Z[:, 1])))).astype(float)
    m = fit_logistic(Z, y)
    assert m.intercept == pytest.approx(0.5, abs=0.05)
    np.testing.assert_allclose(m.coef, [-0.5, -0.5], atol=0.05)


def test_logistic_null_model():
    rng = np.random.default_rng(3)
    n = 20_000
    x = rng.normal(size=(n, 1))
    y = (rng.random(n) < 0.3).astype(float)
    m = fit_logistic(x, y)
    se = 1 / math.sqrt(n * 0.3 * 0.7)
    assert abs(m.coef[0]) < 3 * se


def test_logistic_balanced_binary_feature():
    x = np.array([[0.0]] * 4 + [[1.0]] * 4)
    y = np.array([0, 1, 0, 1, 0, 1, 0, 1], dtype=float)
    m = fit_logistic(x, y)
    assert m.coef[0] == pytest.approx(0.0, abs=1e-10)


def test_logistic_separation_names_feature():
    x = np.column_stack([np.linspace(-1, 1, 40), np.random.default_rng(0).normal(size=40)])
    y = (x[:, 0] > 0).astype(float)
    with pytest.raises(SeparationError) as err:
        fit_logistic(x, y, ("sep", "noise"))
    assert err.value.feature == "sep"


# ---------------------------------------------------------------------------
# HAL basis and path


def test_basis_count_two_features_three_values():
    X = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 0.0]])
    basis = enumerate_basis(X, max_depth=2)
    assert basis.sections == ((0,), (1,), (0, 1))
    assert basis.size == 9
    assert enumerate_basis(X, max_depth=1).sections == ((0,), (1,))


def test_constant_feature_basis_is_merged():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    basis = enumerate_basis(X, max_depth=1)
    Phi = basis.design(X)
    keep = informative_columns(Phi)
    # the single constant indicator of feature 0 and the always-one knot of feature 1 drop out
    assert basis.size == 7 and keep.sum() == 5


def test_lambda_max_gives_intercept_only():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 2))
    y = (rng.random(200) < 0.3).astype(float)
    Phi = enumerate_basis(X, max_knots_per_section=10).design(X)
    lmax = lambda_max(Phi, y)
    fit = solve_path(Phi, y, np.array([lmax * 1.01]))
    assert fit.active[0] == 0
    assert fit.intercepts[0] == pytest.approx(math.log(y.mean() / (1 - y.mean())), abs=1e-6)


@pytest.fixture(scope="module")
def hal_path(sim2_panel):
    rows = build_risk_rows(sim2_panel, TREATMENT, FeatureSpec(("x1", "x2"), stage_degree=0))
    return fit_hal_path(rows.X, rows.response, groups=rows.subject, seed=0, max_knots_per_section=20), rows


def test_kkt_on_every_path_point(hal_path):
    path, _ = hal_path
    fits = [(path.Phi, path.y, path.full)] + [(path.Phi[f.train], path.y[f.train], f.path) for f in path.folds]
    for Phi, y, fp in fits:
        for lam, b0, coef in zip(fp.lambdas, fp.intercepts, fp.coefs):
            assert kkt_violation(Phi, y, b0, coef, lam) <= 1e-6


def test_path_l1_norm_grows_as_penalty_falls(hal_path):
    path, _ = hal_path
    norms = np.abs(path.full.coefs).sum(1)
    assert np.all(np.diff(norms) >= -1e-8)


def test_lambda_floor_scan():
    lambdas = np.array([0.4, 0.3, 0.2, 0.1])
    assert lambda_floor(lambdas, np.array([0, 3, 9, 12]), 100) == 0.2
    assert lambda_floor(lambdas, np.zeros(4, int), 100) == 0.1
    assert lambda_floor(lambdas, np.array([0, 3, 9, 12]), 10 ** 6) == 0.1
    assert lambda_floor(lambdas, np.array([20, 30, 40, 50]), 100) == 0.4


def test_selected_penalty_is_max_of_floor_and_criterion(hal_path):
    path, rows = hal_path
    sel = select_undersmoothed(path)
    assert sel == max(path.lambda_floor, path.lambda_tilde)
    assert path.lambda_floor in path.lambdas and path.lambda_tilde in path.lambdas


def test_undersmoothing_criterion_matches_loop_oracle(hal_path):
    path, _ = hal_path
    undersmooth_score(path)
    icv = path.index(path.lambda_cv)
    L = path.lambdas.size
    oracle = np.zeros(L)
    for fold in path.folds:
        va = fold.valid
        active = np.nonzero(fold.path.coefs[icv])[0]
        for l in range(L):
            b0, coef = fold.path.intercepts[l], fold.path.coefs[l]
            norm = abs(b0) + np.abs(coef).sum()
            total = 0.0
            for k in active:
                s = 0.0
                for r in va:
                    h = 1 / (1 + math.exp(-(b0 + path.Phi[r] @ coef)))
                    h = min(max(h, EPS), 1 - EPS)
                    s += path.Phi[r, k] * (path.y[r] - h) / h
                total += abs(s / va.size)
            oracle[l] += total / norm
    oracle /= len(path.folds)
    np.testing.assert_allclose(path.criterion, oracle, rtol=1e-9)
    assert path.lambda_tilde == path.lambdas[int(np.argmin(oracle))]


def test_score_diagnostic_intercept_only():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0.0, 1.0, 1.0, 0.0])
    basis = enumerate_basis(X, max_depth=1)
    coef = np.zeros(basis.size)
    coef[2] = 0.5
    m = HalModel(basis, 0.0, coef, 0.1)
    d = score_diagnostic(m, X, y)
    prob = 1 / (1 + np.exp(-(0.5 * (X[:, 0] >= 2))))
    expected = abs(np.mean((X[:, 0] >= 2) * (y - prob)))
    assert d["min_score"] == pytest.approx(expected)
    assert d["active"] == 1


# ---------------------------------------------------------------------------
# prediction and cumulative products


def one_row_panel(z1):
    return make_panel([make_traj(LM3, [1, 1, 1], T=30, a=[0, 0, 0], z=[z1, z1, z1])], LM3)


def logistic_fit(b0, b1):
    return HazardFit(TREATMENT, "logistic", FeatureSpec(("z1",), stage_degree=0),
                     {0: LogisticModel(b0, np.array([b1]), ("z1",))})


def test_predict_values():
    p = one_row_panel(0.7)
    assert predict_hazard(logistic_fit(0.0, 0.0), p, 0, 1)[0] == 0.5
    assert predict_hazard(logistic_fit(40.0, 0.0), p, 0, 1)[0] == 1 - EPS
    assert predict_hazard(logistic_fit(0.0, 1.0), p, 0, 1)[0] == pytest.approx(0.668187772, abs=1e-9)


def known(value_a, value_c):
    def truth(role, panel, subject, stage):
        table = value_a if role == TREATMENT else value_c
        return np.array([table[int(j)] for j in stage])
    return truth


def test_cumulative_products_hand_case():
    traj = make_traj(LM3, [1, 1, 1], T=30, a=[0, 1, 1])
    p = make_panel([traj], LM3)
    truth = known({1: 0.3, 2: 0.9}, {1: 0.1, 2: 0.2})
    recipe = NuisanceRecipe("truth", truth=truth)
    fits = fit_hazards(p, recipe)
    f = cumulative_factors(p, fits)
    assert f.Ha[0, 2] == pytest.approx(0.3)
    assert f.Hc[0, 2] == pytest.approx(0.72)
    Ha, Hc = cumulative_weights(p, fits, np.array([0]), f)
    assert Ha[0] == 1 and Hc[0] == 1


def test_mean_weight_one_with_true_hazards():
    cfg = SimConfig(scenario=1, K=6, n=10_000, seed=20240102)
    panel = generate_panel(cfg)
    fits = fit_hazards(panel, NuisanceRecipe("truth", truth=TruthHazards.from_config(cfg)))
    factors = cumulative_factors(panel, fits)
    r = Regime(np.array(cfg.eta_opt))
    scores = landmark_scores(regime_design(panel, r.covariates), r.eta)
    comp = cumulative_compliance(scores, panel.a)
    rows = np.arange(panel.n)
    for x in (5.0, 15.0, 25.0):
        t = derive_targets(panel, x)
        w = comp[rows, t.l_x] * t.delta_c / (factors.Ha[rows, t.l_x] * factors.Hc[rows, t.l_x])
        se = w.std(ddof=1) / math.sqrt(panel.n)
        assert abs(w.mean() - 1) <= 3 * se


def test_fits_json_round_trip(sim_panel):
    fits = fit_hazards(sim_panel, NuisanceRecipe("logistic"))
    back = NuisanceFits.from_dict(json.loads(json.dumps(fits.to_dict())))
    s, j = np.nonzero(sim_panel.y[:, 1:])
    j = j + 1
    np.testing.assert_array_equal(back.treatment.predict(sim_panel, s, j), fits.treatment.predict(sim_panel, s, j))
    np.testing.assert_array_equal(back.censoring.predict(sim_panel, s, j), fits.censoring.predict(sim_panel, s, j))


def test_no_censoring_gives_zero_hazard():
    trajs = [make_traj(LM3, [1, 1, 1], T=t, a=[0, a1, 1], z=[0, z, z], sid=i)
             for i, (t, a1, z) in enumerate([(25, 1, 0.1), (30, 0, 0.4), (22, 1, 0.9), (28, 0, 0.3)])]
    p = make_panel(trajs, LM3)
    fits = fit_hazards(p, NuisanceRecipe("logistic", FeatureSpec(("z1",), 0), FeatureSpec(("z1",), 0)))
    assert fits.censoring.kind == "none"
    assert np.all(cumulative_factors(p, fits).Hc == 1)


def test_hal_fit_is_deterministic(sim2_panel):
    spec = FeatureSpec(("x1", "x2"), stage_degree=0)
    recipe = NuisanceRecipe("hal", spec, spec)
    a = fit_hazards(sim2_panel, recipe, seed=4)
    b = fit_hazards(sim2_panel, recipe, seed=4)
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
