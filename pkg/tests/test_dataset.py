import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slrimpute import (
    ColumnSchema,
    DataError,
    PatientRecord,
    TrialDataset,
    change_from_baseline,
    parse_trial_csv,
    to_csv,
    validate,
)

HEADER = "patient,visit,arm,outcome,on_treatment\n"


def _grid(rows):
    return HEADER + "".join(",".join(map(str, r)) + "\n" for r in rows)


def test_fixture_parses(fixture_a):
    ds = fixture_a
    assert ds.ids == ("C1", "C2", "C3", "C4", "A", "B", "C")
    assert ds.n_visits == 2 and ds.last_visit == 1
    assert ds.disc_visit.tolist() == [2, 2, 2, 2, 1, 2, 2]
    assert math.isnan(ds.outcomes[4, 1])
    assert ds.covariate_names == ()


def test_all_on_treatment_gives_last_plus_one():
    text = _grid([(p, v, p % 2, p + v, 1) for p in range(4) for v in range(2)])
    ds = parse_trial_csv(text)
    assert ds.disc_visit.tolist() == [2, 2, 2, 2]


def test_first_off_treatment_visit():
    text = _grid([("a", 0, 1, 1, 1), ("a", 1, 1, 2, 0), ("b", 0, 0, 1, 1), ("b", 1, 0, 1, 1)])
    assert parse_trial_csv(text).disc_visit.tolist() == [1, 2]


def test_non_absorbing_rejected():
    text = _grid([("a", 0, 1, 1, 1), ("a", 1, 1, 2, 0), ("a", 2, 1, 2, 1)])
    with pytest.raises(DataError, match="non-absorbing treatment status"):
        parse_trial_csv(text)


@pytest.mark.parametrize(
    "rows, message",
    [
        ([("a", 0, 1, "x", 1), ("a", 1, 1, 2, 1)], "malformed numeric cell"),
        ([("a", 0, 1, 1, 1), ("a", 0, 1, 2, 1)], "duplicate"),
        ([("a", 0, 1, 1, 1), ("a", 1, 1, 2, 1), ("b", 0, 0, 1, 1)], "missing visit rows"),
    ],
)
def test_parse_errors(rows, message):
    with pytest.raises(DataError, match=message):
        parse_trial_csv(_grid(rows))


def test_covariate_must_be_constant():
    text = "patient,visit,arm,outcome,on_treatment,age\na,0,1,1,1,30\na,1,1,2,1,31\n"
    with pytest.raises(DataError, match="covariate varying"):
        parse_trial_csv(text)


def test_na_and_empty_are_missing():
    text = _grid([("a", 0, 1, "NA", 1), ("a", 1, 1, "", 1), ("b", 0, 0, 1, 1), ("b", 1, 0, 2, 1)])
    ds = parse_trial_csv(text)
    assert np.isnan(ds.outcomes[0]).all()


def test_schema_mapping():
    text = "id,t,grp,y,trt,sex,site\na,0,1,1,1,0,s1\na,1,1,2,1,0,s1\nb,0,0,3,1,1,s2\nb,1,0,4,1,1,s2\n"
    schema = ColumnSchema.from_mapping(
        {"id": "id", "visit": "t", "arm": "grp", "outcome": "y", "on_treatment": "trt", "stratum": "site"}
    )
    ds = parse_trial_csv(text, schema)
    assert ds.covariate_names == ("sex",)
    assert ds.strata == ("s1", "s2")
    with pytest.raises(DataError, match="unknown schema keys"):
        ColumnSchema.from_mapping({"patient_id": "x"})


def test_validate_fraction():
    rows = [(p, v, p % 2, p + v, 1) for p in range(4) for v in range(2)]
    assert validate(parse_trial_csv(_grid(rows))).missing_fraction == 0.0
    rows[3] = (1, 1, 1, "", 1)
    rep = validate(parse_trial_csv(_grid(rows)))
    assert rep.ok and rep.errors == []
    assert rep.missing_fraction == 0.125


def test_validate_reports_hard_errors():
    ds = TrialDataset(ids=["a", "a"], arm=[1, 2], covariates=np.zeros((2, 0)),
                      outcomes=np.ones((2, 2)), disc_visit=[2, 5])
    rep = validate(ds)
    rules = {rule for _, rule, _ in rep.errors}
    assert {"unique-id", "binary-arm", "disc-range"} <= rules
    assert not rep.ok


def test_change_from_baseline_examples():
    recs = [
        PatientRecord("p", 1, (), (10.0, 12.0, 9.0), 3),
        PatientRecord("q", 0, (), (10.0, None, 9.0), 3),
    ]
    cfb = change_from_baseline(TrialDataset.from_records(recs))
    np.testing.assert_array_equal(cfb.outcomes[0], [2, -1])
    assert np.isnan(cfb.outcomes[1, 0]) and cfb.outcomes[1, 1] == -1
    assert cfb.covariate_names == ("baseline",)
    assert cfb.covariates[:, 0].tolist() == [10, 10]
    assert cfb.disc_visit.tolist() == [2, 2]


def test_change_from_baseline_needs_baseline():
    recs = [PatientRecord("p", 1, (), (None, 12.0, 9.0), 3)]
    with pytest.raises(DataError, match="missing baseline.*p"):
        change_from_baseline(TrialDataset.from_records(recs))


def test_take_relabels_duplicates(fixture_a):
    ds = fixture_a.take([0, 0, 4])
    assert ds.ids == ("C1", "C1#1", "A")
    assert ds.disc_visit.tolist() == [2, 2, 1]


def test_dataset_is_read_only(fixture_a):
    with pytest.raises(ValueError):
        fixture_a.outcomes[0, 0] = 5.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(0, 2))
def test_csv_round_trip(seed, n_visits, n_cov):
    rng = np.random.default_rng(seed)
    n = 6
    Y = rng.normal(size=(n, n_visits)) * 10.0 ** rng.integers(-3, 4)
    Y[rng.random(Y.shape) < 0.2] = np.nan
    ds = TrialDataset(
        ids=[f"id-{k}" for k in range(n)], arm=rng.integers(0, 2, n), covariates=rng.normal(size=(n, n_cov)),
        outcomes=Y, disc_visit=rng.integers(0, n_visits + 1, n), covariate_names=tuple(f"c{k}" for k in range(n_cov)),
        strata=tuple(rng.choice(["x", "y"], n)), strata_name="site",
    )
    back = parse_trial_csv(to_csv(ds), ColumnSchema(stratum="site"))
    assert back.equals(ds)
    np.testing.assert_array_equal(back.outcomes, ds.outcomes)
