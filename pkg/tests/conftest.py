import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from slrimpute import TrialDataset, read_trial_csv

sys.path.insert(0, str(Path(__file__).parent))

FIXTURE_A = resources.files("slrimpute") / "data" / "tiny_fixture_a.csv"


@pytest.fixture
def fixture_a():
    return read_trial_csv(FIXTURE_A)


def random_dataset(rng, n_per_arm=12, n_visits=3, n_cov=1, p_missing=0.15, discontinue=True):
    """Small random trial; outcomes follow an AR-like path so fits are well posed."""
    n = 2 * n_per_arm
    arm = np.repeat([1, 0], n_per_arm)
    X = rng.normal(size=(n, n_cov))
    Y = np.empty((n, n_visits))
    Y[:, 0] = X.sum(axis=1) + rng.normal(size=n)
    for j in range(1, n_visits):
        Y[:, j] = 0.5 * arm + 0.8 * Y[:, j - 1] + rng.normal(size=n)
    if discontinue:
        D = rng.choice(np.arange(1, n_visits + 1), size=n, p=None)
        D[rng.random(n) < 0.5] = n_visits
    else:
        D = np.full(n, n_visits)
    miss = rng.random(Y.shape) < p_missing
    Y[miss] = np.nan
    return TrialDataset(
        ids=[f"P{i}" for i in range(n)], arm=arm, covariates=X, outcomes=Y, disc_visit=D,
        covariate_names=tuple(f"x{k}" for k in range(n_cov)),
    )


# acceptance reporting: one line per criterion in the terminal summary
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props or (report.when != "call" and report.passed):
        return
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP"
    else:
        status = "PASS"
    details = [v for k, v in report.user_properties if k == "detail"]
    prev = _ACCEPTANCE.get(props["criterion"])
    if prev is None or prev[0] == "PASS":
        _ACCEPTANCE[props["criterion"]] = (status, props["title"], details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, details = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title}")
        for d in details:
            terminalreporter.write_line(f"    {d}")
