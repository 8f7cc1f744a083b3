import numpy as np
import pytest
from scipy.stats import norm

from qalopt.panel import Landmarks, derive_target
from qalopt.regimes import (DegenerateScores, Regime, bandwidth_from_scores, compliance, cumulative_compliance,
                            cumulative_smooth_compliance, decide, default_bandwidth, landmark_scores,
                            regime_design, smooth_compliance)

from conftest import make_panel, make_traj

ETA = np.array([1.0, -1.0, -1.0])
LM3 = [0, 10, 20]


def two_cov_traj(z, a, T=100.0):
    return make_traj(LM3, [1, 1, 1], T=T, a=a, z=z, names=("z1", "z2"))


def test_regime_normalized_and_scale_free():
    r = Regime(ETA * 7.0)
    assert np.linalg.norm(r.eta) == pytest.approx(1.0)
    np.testing.assert_allclose(r.eta, ETA / np.sqrt(3))
    with pytest.raises(ValueError):
        Regime(np.zeros(3))
    back = Regime.from_dict(r.to_dict())
    assert back.covariates == r.covariates
    np.testing.assert_allclose(back.eta, r.eta, rtol=1e-15)
    np.testing.assert_allclose(Regime(ETA).eta, Regime(2 * ETA).eta, rtol=1e-15)
    assert Regime(ETA) != Regime(-ETA)


def test_decide_continuation():
    assert decide(Regime(ETA), [1, 5, 5], 1) == 1


def test_decide_dot_product():
    assert decide(Regime(ETA), [1, 0.3, 0.4], 0) == 1
    assert decide(Regime(ETA), [1, 0.7, 0.7], 0) == 0


def test_compliance_full_agreement():
    z = [[0, 0], [0.1, 0.1], [0.9, 0.9]]
    traj = two_cov_traj(z, [0, 1, 1])
    d = derive_target(traj, Landmarks(np.array(LM3, float)), 25.0)
    assert d.l_x == 2
    assert compliance(Regime(ETA), traj, d) == 1


def test_compliance_first_step_disagreement():
    z = [[0, 0], [0.1, 0.1], [0.9, 0.9]]
    traj = two_cov_traj(z, [0, 0, 1])
    d = derive_target(traj, Landmarks(np.array(LM3, float)), 25.0)
    assert compliance(Regime(ETA), traj, d) == 0


def test_compliance_stops_at_l_x():
    # disagreement at j=2 is not counted when l_x = 1
    z = [[0, 0], [0.9, 0.9], [0.0, 0.0]]
    traj = two_cov_traj(z, [0, 0, 0])
    d = derive_target(traj, Landmarks(np.array(LM3, float)), 15.0)
    assert d.l_x == 1
    assert compliance(Regime(ETA), traj, d) == 1


def test_bandwidth_formula():
    rng = np.random.default_rng(0)
    v = rng.normal(size=1000)
    v = (v - v.mean()) / v.std(ddof=1) * 1.2
    assert bandwidth_from_scores(v, 500, 6) == pytest.approx(0.025198, abs=1e-5)


def test_bandwidth_degenerate_intercept_only(sim_panel):
    with pytest.raises(DegenerateScores, match="degenerate score distribution"):
        default_bandwidth(sim_panel, Regime(np.array([1.0]), ("intercept",)))


def test_bandwidth_shrinks_with_n():
    v = np.linspace(-1, 1, 50)
    assert bandwidth_from_scores(v, 10 ** 6, 6) < bandwidth_from_scores(v, 100, 6)


def test_smooth_weight_at_zero_score():
    # score exactly 0 at j=1 (z1 + z2 = 1 with intercept coefficient equal)
    z = [[0, 0], [0.5, 0.5], [0.5, 0.5]]
    traj = two_cov_traj(z, [0, 1, 1])
    d = derive_target(traj, Landmarks(np.array(LM3, float)), 15.0)
    assert smooth_compliance(Regime(ETA), traj, d, 0.3) == pytest.approx(0.5)


def test_smooth_weight_after_initiation():
    z = [[0, 0], [0.0, 0.0], [0.9, 0.9]]
    nu = 0.7
    score1 = 1 / np.sqrt(3)
    traj = two_cov_traj(z, [0, 1, 1])
    d = derive_target(traj, Landmarks(np.array(LM3, float)), 25.0)
    expected = norm.cdf(score1 / nu) * norm.cdf(1 / nu)
    assert smooth_compliance(Regime(ETA), traj, d, nu) == pytest.approx(expected, rel=1e-12)
    traj0 = two_cov_traj(z, [0, 1, 0])
    assert smooth_compliance(Regime(ETA), traj0, d, nu) == pytest.approx(norm.cdf(score1 / nu) * (1 - norm.cdf(1 / nu)))


def test_smooth_converges_to_hard(sim_panel):
    r = Regime(ETA)
    scores = landmark_scores(regime_design(sim_panel, r.covariates), r.eta)
    hard = cumulative_compliance(scores, sim_panel.a)
    soft = cumulative_smooth_compliance(scores, sim_panel.a, 1e-10)
    np.testing.assert_allclose(soft, hard, atol=1e-12)


def test_vectorized_compliance_matches_scalar(sim_panel):
    r = Regime(np.array([0.4, -1.0, 0.3]))
    scores = landmark_scores(regime_design(sim_panel, r.covariates), r.eta)
    hard = cumulative_compliance(scores, sim_panel.a)
    for i in range(0, sim_panel.n, 23):
        traj = sim_panel.subject(i)
        d = derive_target(traj, sim_panel.landmarks, 12.0)
        assert hard[i, d.l_x] == compliance(r, traj, d)


def test_panel_fixture_has_two_covariates(sim_panel):
    assert {"z1", "z2"} <= set(sim_panel.covariate_names)
    assert make_panel([make_traj(LM3, [1, 1, 1], 5)], LM3).n == 1
