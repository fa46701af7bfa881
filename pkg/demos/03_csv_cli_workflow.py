# coding: utf-8

# # From a CSV file to a report
#
# Trial data usually arrive as one row per patient and visit. This script
# writes a simulated trial to disk with non-default column names, then drives
# the command line tool exactly as a user would from a shell.

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from slrimpute import builtin_scenario, to_csv
from slrimpute.simulation import generate

work = Path(tempfile.mkdtemp(prefix="slrimpute-demo-"))
ds = generate(builtin_scenario(3, n_per_arm=200), seed=4).observed
text = to_csv(ds).replace("patient,visit,arm,outcome,on_treatment", "subject,week,group,score,ontrt", 1)
(work / "trial.csv").write_text(text)
print(text.splitlines()[:4])


# ## Column mapping
#
# A YAML schema maps the file's headers to their roles. Any column without a
# role is read as a baseline covariate and must be constant within patient.

(work / "schema.yaml").write_text(
    "id: subject\nvisit: week\narm: group\noutcome: score\non_treatment: ontrt\n"
)


def slrimpute(*args):
    cmd = [sys.executable, "-m", "slrimpute.cli", *map(str, args)]
    print("$ slrimpute", " ".join(map(str, args)))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(proc.stdout + proc.stderr)
    return proc.returncode


# ## Validate first

slrimpute("validate", "--input", work / "trial.csv", "--schema", work / "schema.yaml", "--out", work)


# ## Analyse under J2R with jackknife intervals

slrimpute("analyze", "--input", work / "trial.csv", "--schema", work / "schema.yaml", "--strategy", "j2r",
          "--covariates", "X1,X2,X3", "--inference", "jackknife", "--out", work / "j2r")
result = json.loads((work / "j2r" / "report.json").read_text())["result"]
print("effect %.3f, 95%% CI (%.3f, %.3f)" % (result["point"], result["ci_low"], result["ci_high"]))


# ## Errors are one line with a nonzero exit code

code = slrimpute("analyze", "--input", work / "nope.csv", "--out", work)
print("exit code", code)
print("outputs in", work)
