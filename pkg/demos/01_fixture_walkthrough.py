# coding: utf-8

# # Walking through a seven-patient trial
#
# The package ships a tiny two-visit trial: four control patients and three on
# the active drug. Patient A stops treatment at visit 1 and its outcome there
# is missing. Every number below can be checked by hand.

import numpy as np

from slrimpute import AnalysisModel, estimate_effect, fit_slr_models, impute
from slrimpute.dataset import read_trial_csv
from importlib import resources

path = resources.files("slrimpute") / "data" / "tiny_fixture_a.csv"
ds = read_trial_csv(path)
print(ds.ids)
print(ds.outcomes)
print("discontinuation visit:", ds.disc_visit)


# ## Per-visit regressions
#
# One regression per visit and arm, fitted on patients who are observed and
# still on treatment. In the control arm the visit-1 outcome equals baseline,
# so the slope is 1 and the intercept 0. In the active arm only B and C are
# usable, which leaves no residual degrees of freedom; the fit still goes
# ahead and is listed in `underpowered`.

models = fit_slr_models(ds)
for z in (0, 1):
    print(f"arm {z}: intercept {models.beta_prime(1, z)}, slope on Y0 {models.beta(1, z)}")
print("underpowered fits (visit, arm, n, p):", models.underpowered)


# ## Three ways to fill A's missing outcome
#
# Hypothetical: A is predicted from the active-arm model, as if it had stayed
# on treatment. J2R: A gets the control-arm prediction. CIR: A keeps the
# benefit it had at its last on-treatment visit and then follows control.

row = ds.ids.index("A")
for strategy in ("hypothetical", "j2r", "cir"):
    cd = impute(ds, models, strategy)
    theta = estimate_effect(cd, AnalysisModel())
    print(f"{strategy:>12}: Y_A1 = {cd.values[row, 1]:.4f}, effect = {theta.point:.4f}")


# Expected: 7, 13/6 and 4 for the imputed value; 29/6, 29/9 and 23/6 for the
# effect.

print(np.array([7, 13 / 6, 4]), np.array([29 / 6, 29 / 9, 23 / 6]))


# ## Provenance
#
# Each completed cell records where it came from.

print(impute(ds, models, "cir").to_csv())
