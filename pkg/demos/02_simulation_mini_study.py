# coding: utf-8

# # A small simulation study
#
# Four built-in scenarios mirror a five-visit depression trial with 500
# patients per arm. Settings 1 and 3 carry a treatment effect and generate
# post-discontinuation data under CIR and J2R respectively; settings 2 and 4
# are their null counterparts.
#
# This script runs a few dozen replicates so it finishes in about a minute.
# The acceptance suite runs 200 per setting.

import time

import numpy as np

from slrimpute import builtin_scenario, run_study, true_estimands
from slrimpute.simulation import default_methods, generate

sc = builtin_scenario(1)
print(sc.name, "truth:", sc.truth.value, "n per arm:", sc.n_per_arm)


# ## One simulated trial
#
# `generate` returns the complete data (what would have been seen without
# missingness) next to the observed data.

pair = generate(sc, seed=1)
obs = pair.observed
print("patients:", obs.n_patients, "visits:", obs.n_visits)
print("missing cells: %.1f%%" % (100 * np.isnan(obs.outcomes).mean()))


# ## True estimands
#
# The hypothetical effect is available in closed form. The treatment policy
# effect depends on who discontinues, so it is estimated by Monte Carlo.

truth = true_estimands(sc, n_mc=10**6)
print(f"hypothetical {truth.hypothetical:.4f}, policy {truth.policy:.4f} (MC SE {truth.policy_mc_se:.4f})")


# ## Operating characteristics
#
# Each replicate is analysed by complete-data OLS and by SLR with jackknife
# and bootstrap intervals.

t0 = time.perf_counter()
report = run_study(sc, n_sims=20, methods=default_methods(sc, boot_samples=200), seed=7)
print(report.format_table())
print("%.1f s" % (time.perf_counter() - t0))
