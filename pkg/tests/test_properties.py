import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracle
from qalopt.estimators import IPW, NoEffectiveObservations, RqalEvaluator, survival_at
from qalopt.hazards import NuisanceRecipe, cumulative_factors, fit_hazards
from qalopt.hazards.hal import fit_hal_path, kkt_violation
from qalopt.io import read_panel, write_panel
from qalopt.panel import Landmarks, compute_qal, qal_inverse
from qalopt.regimes import Regime, cumulative_smooth_compliance

from conftest import make_traj, panel_from_records, toy_truth

TIMES = [0.0, 10.0, 20.0]
SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])

unit = st.floats(0.0, 1.0, allow_nan=False)
positive_unit = st.floats(0.05, 1.0, allow_nan=False)


@st.composite
def subject_records(draw):
    init = draw(st.sampled_from([1, 2, None]))
    T = draw(st.floats(0.5, 40.0))
    censored = draw(st.booleans())
    C = T - draw(st.floats(0.1, 0.9)) * T if censored else math.inf
    return {"T": T, "C": C,
            "q": [draw(unit) for _ in TIMES],
            "a": [0, 1 if init == 1 else 0, 1 if init in (1, 2) else 0],
            "z": [(draw(unit), draw(unit)) for _ in TIMES]}


etas = st.tuples(*[st.floats(-1.0, 1.0) for _ in range(3)]).filter(lambda v: np.linalg.norm(v) > 0.1)


def evaluator(subjects, L_U=20.0):
    p = panel_from_records(TIMES, subjects)
    fits = fit_hazards(p, NuisanceRecipe("truth", truth=toy_truth))
    return p, fits, RqalEvaluator(p, cumulative_factors(p, fits), L_U)


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=5), etas)
def test_matches_scalar_oracle_on_random_panels(subjects, eta):
    r = Regime(np.array(eta))
    want = oracle.rqal(TIMES, subjects, list(r.eta), 20.0)
    _, _, ev = evaluator(subjects)
    if want is None:
        with pytest.raises(NoEffectiveObservations):
            ev.value(r, IPW)
    else:
        assert ev.value(r, IPW) == pytest.approx(want, rel=1e-9, abs=1e-9)


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=5), etas, st.floats(0.1, 10.0))
def test_regime_scale_does_not_matter(subjects, eta, c):
    _, _, ev = evaluator(subjects)
    eta = np.array(eta)
    try:
        base = ev.value(Regime(eta), IPW)
    except NoEffectiveObservations:
        return
    assert ev.value(Regime(c * eta), IPW) == pytest.approx(base, rel=1e-12, abs=1e-12)


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=4), etas, st.integers(2, 3))
def test_replicating_every_subject_leaves_estimate_unchanged(subjects, eta, copies):
    # equal scaling of all weights cancels in the survival ratio
    _, _, ev = evaluator(subjects)
    _, _, ev_rep = evaluator(subjects * copies)
    r = Regime(np.array(eta))
    try:
        base = ev.value(r, IPW)
    except NoEffectiveObservations:
        return
    assert ev_rep.value(r, IPW) == pytest.approx(base, rel=1e-10, abs=1e-10)


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=5), etas, st.floats(0.0, 30.0))
def test_survival_ratio_is_a_probability(subjects, eta, x):
    p, fits, _ = evaluator(subjects)
    try:
        S, _ = survival_at(p, fits, Regime(np.array(eta)), x)
    except NoEffectiveObservations:
        return
    assert 0.0 <= S <= 1.0


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=5), etas, st.floats(1e-3, 5.0))
def test_smoothed_compliance_is_a_probability(subjects, eta, nu):
    p = panel_from_records(TIMES, subjects)
    design = np.stack([np.ones(p.a.shape), p.covariate("z1"), p.covariate("z2")], axis=-1)
    scores = design @ Regime(np.array(eta)).eta
    cc = cumulative_smooth_compliance(scores, p.a, nu)
    assert np.all((cc >= 0) & (cc <= 1))
    assert np.all(np.diff(cc, axis=1) <= 1e-15)


@SETTINGS
@given(st.lists(positive_unit, min_size=3, max_size=3), st.floats(1.0, 40.0), st.floats(0.0, 1.0))
def test_quality_time_inverse_round_trip(q, T, frac):
    lm = Landmarks(np.array(TIMES))
    traj = make_traj(TIMES, q, T=T)
    s = frac * T
    x = compute_qal(traj, lm, upto=s)
    back = qal_inverse(traj, lm, x)
    assert back == pytest.approx(s, rel=1e-9, abs=1e-9)
    assert compute_qal(traj, lm, upto=back) == pytest.approx(x, rel=1e-9, abs=1e-9)


@SETTINGS
@given(st.lists(subject_records(), min_size=1, max_size=6))
def test_panel_files_round_trip(tmp_path_factory, subjects):
    p = panel_from_records(TIMES, subjects)
    d = tmp_path_factory.mktemp("io")
    write_panel(p, d / "panel.csv", d / "subjects.csv")
    back = read_panel(d / "panel.csv", d / "subjects.csv")
    for name in ("z", "a", "q", "event_time", "censor_time", "y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(p, name))
    assert back.covariate_names == p.covariate_names and back.landmarks == p.landmarks


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(30, 80))
def test_hal_path_satisfies_optimality(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    y = (rng.random(n) < 1 / (1 + np.exp(-(2 * X[:, 0] - X[:, 1])))).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    path = fit_hal_path(X, y, cv_folds=2, seed=seed, n_lambda=12, max_knots_per_section=10, early_stop=False)
    for lam, b0, coef in zip(path.full.lambdas, path.full.intercepts, path.full.coefs):
        assert kkt_violation(path.Phi, path.y, b0, coef, lam) <= 1e-6
