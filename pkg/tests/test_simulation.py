from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from slrimpute import NotPositiveDefiniteError, SimulationError, Strategy, fit_slr_models, impute
from slrimpute.analysis import AnalysisModel
from slrimpute.inference import PipelineSpec
from slrimpute.simulation import (
    COMPLETE_DATA,
    DEFAULT_SIGMA,
    MethodSpec,
    Scenario,
    builtin_scenario,
    dump_scenario,
    generate,
    load_scenario,
    run_study,
    sample_mvn,
    true_estimands,
)


def test_sample_mvn_zero_factor_returns_mean():
    mean = np.array([1.5, -2.0, 3.25])
    out = sample_mvn(mean, np.zeros((3, 3)), np.random.default_rng(0))
    np.testing.assert_array_equal(out, mean)


def test_sample_mvn_identity_covariance():
    draws = sample_mvn(np.zeros(3), np.eye(3), np.random.default_rng(1), size=10**6)
    assert np.abs(np.cov(draws.T) - np.eye(3)).max() < 0.01


def test_sample_mvn_default_covariance():
    S = np.array(DEFAULT_SIGMA)
    sc = builtin_scenario(1)
    draws = sample_mvn(np.zeros(5), sc.chol, np.random.default_rng(2), size=10**6)
    assert np.abs(np.cov(draws.T) - S).max() < 0.15


def test_sample_mvn_dimension_check():
    with pytest.raises(ValueError):
        sample_mvn(np.zeros(2), np.eye(3), np.random.default_rng(0))


def test_generate_is_deterministic_and_consistent():
    sc = builtin_scenario(1, n_per_arm=200)
    a, b = generate(sc, 5), generate(sc, 5)
    np.testing.assert_array_equal(a.observed.outcomes, b.observed.outcomes)
    assert not np.array_equal(generate(sc, 6).complete.outcomes, a.complete.outcomes)
    obs = ~np.isnan(a.observed.outcomes)
    np.testing.assert_array_equal(a.observed.outcomes[obs], a.complete.outcomes[obs])
    np.testing.assert_array_equal(a.observed.disc_visit, a.complete.disc_visit)
    assert not np.isnan(a.complete.outcomes).any()
    assert set(np.unique(a.observed.disc_visit)) <= {2, 3, 4, 5, 6}
    assert a.observed.n_visits == 6 and a.observed.covariate_names == ("X1", "X2", "X3")


def test_generate_without_missingness_sources():
    sc = replace(builtin_scenario(3, n_per_arm=100), withdrawal_prob=0.0, cell_missing_prob=0.0)
    pair = generate(sc, 1)
    np.testing.assert_array_equal(pair.observed.outcomes, pair.complete.outcomes)


def test_infinite_retention_means_no_discontinuation():
    sc = replace(builtin_scenario(1, n_per_arm=100), retention_intercept=float("inf"))
    assert (generate(sc, 0).observed.disc_visit == 6).all()


@pytest.mark.parametrize("setting", [1, 3])
def test_post_discontinuation_construction(setting):
    sc = builtin_scenario(setting, n_per_arm=300)
    pair = generate(sc, 4)
    effect = np.concatenate([[0.0], np.subtract(sc.mean_active, sc.mean_control)])
    Y, A, D, Z = pair.complete.outcomes, pair.always_treated, pair.complete.disc_visit, pair.complete.arm
    for i in range(Y.shape[0]):
        for j in range(6):
            if Z[i] == 1 and j >= D[i]:
                kept = effect[D[i] - 1] if sc.truth is Strategy.CIR else 0.0
                assert Y[i, j] == pytest.approx(A[i, j] - effect[j] + kept, abs=1e-12)
            else:
                assert Y[i, j] == A[i, j]


def test_missingness_rate_near_twelve_percent():
    sc = builtin_scenario(1)
    frac = np.mean([np.isnan(generate(sc, r).observed.outcomes).mean() for r in range(60)])
    assert abs(frac - 0.123) < 0.01


def test_true_estimands_routes_agree():
    sc = builtin_scenario(1)
    direct = true_estimands(sc, n_mc=4 * 10**5, seed=1)
    cond = true_estimands(sc, n_mc=10**5, seed=2, method="conditional")
    assert direct.hypothetical == pytest.approx(-0.95, abs=1e-12)
    assert cond.hypothetical == direct.hypothetical
    assert abs(direct.policy - cond.policy) < 4 * np.hypot(direct.policy_mc_se, cond.policy_mc_se)
    assert cond.policy == pytest.approx(sc.policy_truth, abs=5 * cond.policy_mc_se + 1e-5)


def test_null_scenarios():
    sc = builtin_scenario(4)
    assert sc.is_null and sc.hypothetical_truth == 0.0 and sc.policy_truth == 0.0
    assert true_estimands(sc, n_mc=10**4, method="conditional").policy == 0.0


def test_scenario_validation():
    bad = [list(r) for r in DEFAULT_SIGMA]
    bad[0][0] = -1.0
    with pytest.raises(NotPositiveDefiniteError, match="pivot 0"):
        replace(builtin_scenario(1), sigma=bad)
    with pytest.raises(SimulationError, match=r"\[0, 1\]"):
        replace(builtin_scenario(1), withdrawal_prob=1.5)
    with pytest.raises(SimulationError, match="5x5"):
        replace(builtin_scenario(1), sigma=np.eye(4))
    with pytest.raises(SimulationError, match="cir or j2r"):
        replace(builtin_scenario(1), truth="hypothetical")
    with pytest.raises(SimulationError, match="unknown scenario keys"):
        Scenario.from_mapping({"n": 3})


@pytest.mark.parametrize("setting", [1, 2, 3, 4])
def test_shipped_scenarios_match_builtins(setting, tmp_path):
    path = resources.files("slrimpute") / "data" / f"setting{setting}.yaml"
    assert load_scenario(path) == builtin_scenario(setting)
    out = tmp_path / "s.yaml"
    out.write_text(dump_scenario(builtin_scenario(setting)))
    assert load_scenario(out) == builtin_scenario(setting)


def _pipe(strategy):
    covs = ("X1", "X2", "X3")
    return PipelineSpec(strategy, covs, AnalysisModel(covariates=covs))


def test_run_study_report_invariants():
    sc = builtin_scenario(3, n_per_arm=120)
    methods = [MethodSpec(_pipe("j2r"), "jackknife"), MethodSpec(_pipe("j2r"), "bootstrap", boot_samples=100)]
    rep = run_study(sc, 6, methods, seed=2)
    assert [s.method for s in rep.summaries] == [COMPLETE_DATA, "SLR-J2R jackknife", "SLR-J2R bootstrap"]
    for s in rep.summaries:
        assert s.rmse >= abs(s.bias)
        assert 0 <= s.coverage <= 1 and 0 <= s.rejection_rate <= 1
        assert s.n_replicates == 6 and s.n_failures == 0
    jk, bs = rep.estimates["SLR-J2R jackknife"], rep.estimates["SLR-J2R bootstrap"]
    assert [r[0] for r in jk] == [r[0] for r in bs]
    assert rep.truth == sc.policy_truth
    assert rep.to_csv().splitlines()[0].startswith("method,bias,rmse,coverage,power,type_i_error")
    assert "Type I" in rep.format_table()
    again = run_study(sc, 6, methods, seed=2, workers=3)
    assert again.to_csv() == rep.to_csv() and again.replicates_csv() == rep.replicates_csv()


def test_run_study_without_missingness_matches_complete_data_ols():
    sc = replace(builtin_scenario(3, n_per_arm=80), withdrawal_prob=0.0, cell_missing_prob=0.0)
    rep = run_study(sc, 3, [MethodSpec(_pipe("j2r"), "jackknife")], seed=7)
    for r in range(3):
        pair = generate(sc, np.random.SeedSequence(7, spawn_key=(r, 0)))
        ds = pair.complete
        V = np.column_stack([np.ones(ds.n_patients), ds.arm, ds.covariates])
        b = np.linalg.lstsq(V, ds.outcomes[:, -1], rcond=None)[0]
        assert rep.estimates["SLR-J2R jackknife"][r][0] == pytest.approx(b[1], abs=1e-10)
        # J2R keeps every observed value, so nothing is imputed
        cd = impute(ds, fit_slr_models(ds), "j2r")
        np.testing.assert_array_equal(cd.values, ds.outcomes)


def test_run_study_aborts_on_failures():
    sc = builtin_scenario(1, n_per_arm=6)
    with pytest.raises(SimulationError, match="replicates failed"):
        run_study(sc, 3, [MethodSpec(_pipe("cir"), "jackknife")], seed=0)
