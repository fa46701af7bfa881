"""Longitudinal trial data: ingestion, validation and transformation.

A dataset holds one row per patient with outcomes on a common visit grid
``0..M`` (visit 0 is baseline). Missing outcomes are stored as NaN. The
discontinuation visit ``D`` is the first visit at which the patient was off
their assigned treatment, ``M + 1`` if they never stopped and ``0`` if they
never started.

The on-disk format is long CSV, one row per patient-visit::

    patient,visit,arm,outcome,on_treatment,X1,X2
    p1,0,1,4.0,1,0,1
    p1,1,1,,0,0,1
"""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class PatientRecord:
    id: str
    arm: int
    covariates: tuple
    outcomes: tuple  # None marks a missing outcome
    disc_visit: int
    stratum: Optional[str] = None

    def on_treatment(self, visit: int) -> bool:
        return visit < self.disc_visit


def _readonly(a):
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable, array-backed trial dataset.

    Attributes
    ----------
    ids : tuple of str
    arm : int array (n,)
        1 = active, 0 = control.
    covariates : float array (n, q)
    outcomes : float array (n, M + 1)
        NaN where the outcome is missing.
    disc_visit : int array (n,)
    covariate_names : tuple of str
    strata : tuple of str, optional
    strata_name : str, optional
    """

    ids: tuple
    arm: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    disc_visit: np.ndarray
    covariate_names: tuple = ()
    strata: Optional[tuple] = None
    strata_name: Optional[str] = None

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        outcomes = np.asarray(self.outcomes, dtype=float)
        if outcomes.ndim != 2 or outcomes.shape[0] != n:
            raise DataError(f"outcomes must have shape (n_patients, n_visits); got {outcomes.shape}")
        covs = np.asarray(self.covariates, dtype=float)
        if covs.size == 0:
            covs = covs.reshape(n, 0)
        if covs.ndim != 2 or covs.shape[0] != n:
            raise DataError(f"covariates must have shape (n_patients, q); got {covs.shape}")
        names = tuple(str(c) for c in self.covariate_names)
        if len(names) != covs.shape[1]:
            raise DataError(f"{covs.shape[1]} covariate columns but {len(names)} names")
        arm = np.asarray(self.arm)
        disc = np.asarray(self.disc_visit)
        if arm.shape != (n,) or disc.shape != (n,):
            raise DataError("arm and disc_visit must have one entry per patient")
        strata = None if self.strata is None else tuple(str(s) for s in self.strata)
        if strata is not None and len(strata) != n:
            raise DataError("strata must have one entry per patient")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "arm", _readonly(arm.astype(np.int64)))
        object.__setattr__(self, "disc_visit", _readonly(disc.astype(np.int64)))
        object.__setattr__(self, "covariates", _readonly(covs))
        object.__setattr__(self, "outcomes", _readonly(outcomes))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "strata", strata)

    @classmethod
    def from_records(cls, patients: Sequence[PatientRecord], covariate_names=(), strata_name=None):
        patients = list(patients)
        if not patients:
            raise DataError("dataset has no patients")
        lengths = {len(p.outcomes) for p in patients}
        if len(lengths) != 1:
            raise DataError(f"patients have differing visit grids: lengths {sorted(lengths)}")
        has_strata = any(p.stratum is not None for p in patients)
        return cls(
            ids=[p.id for p in patients],
            arm=[p.arm for p in patients],
            covariates=np.array([p.covariates for p in patients], dtype=float).reshape(len(patients), len(covariate_names)),
            outcomes=[[np.nan if v is None else v for v in p.outcomes] for p in patients],
            disc_visit=[p.disc_visit for p in patients],
            covariate_names=covariate_names,
            strata=[("" if p.stratum is None else p.stratum) for p in patients] if has_strata else None,
            strata_name=strata_name,
        )

    @property
    def n_patients(self) -> int:
        return len(self.ids)

    @property
    def n_visits(self) -> int:
        return self.outcomes.shape[1]

    @property
    def last_visit(self) -> int:
        return self.n_visits - 1

    @cached_property
    def observed(self) -> np.ndarray:
        return _readonly(~np.isnan(self.outcomes))

    @cached_property
    def patients(self) -> tuple:
        recs = []
        for i, pid in enumerate(self.ids):
            recs.append(
                PatientRecord(
                    id=pid,
                    arm=int(self.arm[i]),
                    covariates=tuple(float(v) for v in self.covariates[i]),
                    outcomes=tuple(None if math.isnan(v) else float(v) for v in self.outcomes[i]),
                    disc_visit=int(self.disc_visit[i]),
                    stratum=None if self.strata is None else self.strata[i],
                )
            )
        return tuple(recs)

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        idx = []
        for name in names:
            if name not in self.covariate_names:
                raise DataError(f"unknown covariate {name!r}; available: {list(self.covariate_names)}")
            idx.append(self.covariate_names.index(name))
        return self.covariates[:, idx]

    def take(self, indices, relabel=True) -> "TrialDataset":
        """Dataset made of the given patients (repeats allowed).

        With ``relabel`` repeated patients get ``#k`` suffixes so ids stay unique.
        """
        indices = np.asarray(indices, dtype=np.int64)
        ids = [self.ids[i] for i in indices]
        if relabel:
            seen = {}
            out = []
            for pid in ids:
                k = seen.get(pid, 0)
                seen[pid] = k + 1
                out.append(pid if k == 0 else f"{pid}#{k}")
            ids = out
        return TrialDataset(
            ids=ids,
            arm=self.arm[indices],
            covariates=self.covariates[indices],
            outcomes=self.outcomes[indices],
            disc_visit=self.disc_visit[indices],
            covariate_names=self.covariate_names,
            strata=None if self.strata is None else [self.strata[i] for i in indices],
            strata_name=self.strata_name,
        )

    def drop(self, index: int) -> "TrialDataset":
        keep = np.delete(np.arange(self.n_patients), index)
        return self.take(keep, relabel=False)

    def with_outcomes(self, outcomes) -> "TrialDataset":
        return TrialDataset(
            self.ids, self.arm, self.covariates, outcomes, self.disc_visit,
            self.covariate_names, self.strata, self.strata_name,
        )

    def equals(self, other: "TrialDataset") -> bool:
        """Exact equality (NaN-aware) of every field."""
        return (
            self.ids == other.ids
            and self.covariate_names == other.covariate_names
            and self.strata == other.strata
            and self.strata_name == other.strata_name
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.disc_visit, other.disc_visit)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.outcomes, other.outcomes, equal_nan=True)
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Column names of the long CSV format.

    ``covariates=None`` means every column not otherwise assigned.
    """

    id: str = "patient"
    visit: str = "visit"
    arm: str = "arm"
    outcome: str = "outcome"
    on_treatment: str = "on_treatment"
    covariates: Optional[tuple] = None
    stratum: Optional[str] = None

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ColumnSchema":
        known = {"id", "visit", "arm", "outcome", "on_treatment", "covariates", "stratum"}
        unknown = set(mapping) - known
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        kw = dict(mapping)
        if kw.get("covariates") is not None:
            kw["covariates"] = tuple(kw["covariates"])
        return cls(**kw)


def _number(text, what, row_no):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {row_no}: malformed numeric cell {what}={text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row_no}: non-finite value {what}={text!r}")
    return value


def _integer(text, what, row_no):
    value = _number(text, what, row_no)
    if value != int(value):
        raise DataError(f"row {row_no}: {what} must be an integer, got {text!r}")
    return int(value)


def parse_trial_csv(data, schema: ColumnSchema = ColumnSchema()) -> TrialDataset:
    """Parse a long-format CSV (bytes, str or text file) into a dataset.

    Raises
    ------
    DataError
        On malformed numeric cells, duplicate (patient, visit) rows, missing
        visit rows, covariates varying within a patient, or a non-absorbing
        on-treatment sequence.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    if isinstance(data, str):
        data = io.StringIO(data)
    reader = csv.DictReader(data)
    header = reader.fieldnames or []
    required = [schema.id, schema.visit, schema.arm, schema.outcome, schema.on_treatment]
    missing_cols = [c for c in required if c not in header]
    if schema.stratum is not None and schema.stratum not in header:
        missing_cols.append(schema.stratum)
    if missing_cols:
        raise DataError(f"missing required columns: {missing_cols}")
    if schema.covariates is None:
        assigned = set(required) | ({schema.stratum} if schema.stratum else set())
        cov_names = tuple(c for c in header if c not in assigned)
    else:
        cov_names = tuple(schema.covariates)
        absent = [c for c in cov_names if c not in header]
        if absent:
            raise DataError(f"covariate columns not found: {absent}")

    per_patient: "OrderedDict[str, dict]" = OrderedDict()
    max_visit = -1
    for row_no, row in enumerate(reader, start=2):
        pid = row[schema.id]
        if pid is None or pid == "":
            raise DataError(f"row {row_no}: empty patient id")
        visit = _integer(row[schema.visit], schema.visit, row_no)
        if visit < 0:
            raise DataError(f"row {row_no}: negative visit index {visit}")
        arm = _integer(row[schema.arm], schema.arm, row_no)
        on_trt = _integer(row[schema.on_treatment], schema.on_treatment, row_no)
        if on_trt not in (0, 1):
            raise DataError(f"row {row_no}: on_treatment must be 0 or 1, got {on_trt}")
        raw_y = row[schema.outcome]
        y = None if raw_y is None or raw_y.strip() in MISSING_TOKENS else _number(raw_y, schema.outcome, row_no)
        covs = []
        for c in cov_names:
            cell = row[c]
            if cell is None or cell.strip() in MISSING_TOKENS:
                raise DataError(f"row {row_no}: patient {pid}: missing baseline covariate {c!r}")
            covs.append(_number(cell, c, row_no))
        stratum = row[schema.stratum] if schema.stratum else None

        rec = per_patient.get(pid)
        if rec is None:
            rec = per_patient[pid] = {"arm": arm, "covs": tuple(covs), "stratum": stratum, "visits": {}}
        else:
            if rec["arm"] != arm:
                raise DataError(f"patient {pid}: arm varies between rows")
            if rec["covs"] != tuple(covs):
                raise DataError(f"patient {pid}: covariate varying within patient")
            if rec["stratum"] != stratum:
                raise DataError(f"patient {pid}: stratum varies between rows")
        if visit in rec["visits"]:
            raise DataError(f"patient {pid}: duplicate (patient, visit) row for visit {visit}")
        rec["visits"][visit] = (y, on_trt)
        max_visit = max(max_visit, visit)

    if not per_patient:
        raise DataError("no data rows")
    n_visits = max_visit + 1
    records = []
    for pid, rec in per_patient.items():
        visits = rec["visits"]
        absent = [v for v in range(n_visits) if v not in visits]
        if absent:
            raise DataError(f"patient {pid}: missing visit rows {absent}")
        flags = [visits[v][1] for v in range(n_visits)]
        disc = flags.index(0) if 0 in flags else n_visits
        if any(flags[disc:]):
            raise DataError(f"patient {pid}: non-absorbing treatment status {tuple(flags)}")
        records.append(
            PatientRecord(
                id=pid,
                arm=rec["arm"],
                covariates=rec["covs"],
                outcomes=tuple(visits[v][0] for v in range(n_visits)),
                disc_visit=disc,
                stratum=rec["stratum"],
            )
        )
    ds = TrialDataset.from_records(records, cov_names, schema.stratum)
    report = validate(ds)
    if report.errors:
        pid, rule, msg = report.errors[0]
        raise DataError(f"patient {pid}: {msg}" if pid else msg)
    return ds


def _fmt(value: float) -> str:
    return repr(float(value))


def to_csv(ds: TrialDataset, schema: ColumnSchema = ColumnSchema()) -> str:
    """Serialize to the long CSV format read by ``parse_trial_csv``."""
    cov_cols = ds.covariate_names if schema.covariates is None else schema.covariates
    if tuple(cov_cols) != ds.covariate_names:
        raise DataError("schema covariates do not match the dataset's covariates")
    header = [schema.id, schema.visit, schema.arm, schema.outcome, schema.on_treatment, *cov_cols]
    stratum_col = schema.stratum or ds.strata_name
    if ds.strata is not None:
        if stratum_col is None:
            raise DataError("dataset has strata but no stratum column name")
        header.append(stratum_col)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, pid in enumerate(ds.ids):
        covs = [_fmt(v) for v in ds.covariates[i]]
        for j in range(ds.n_visits):
            y = ds.outcomes[i, j]
            row = [pid, j, int(ds.arm[i]), "" if math.isnan(y) else _fmt(y),
                   1 if j < ds.disc_visit[i] else 0, *covs]
            if ds.strata is not None:
                row.append(ds.strata[i])
            w.writerow(row)
    return buf.getvalue()


@dataclass
class ValidationReport:
    """Hard errors, warnings and missingness/discontinuation summaries.

    ``errors`` and ``warnings`` hold ``(patient_id, rule, message)`` tuples;
    the patient id is ``None`` for dataset-level findings.
    """

    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    n_patients: int = 0
    n_visits: int = 0
    n_per_arm: dict = field(default_factory=dict)
    missing_fraction: float = 0.0
    missing_by_visit: list = field(default_factory=list)
    missing_by_arm: dict = field(default_factory=dict)
    discontinued_at: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def format(self) -> str:
        lines = [
            f"patients: {self.n_patients} (active {self.n_per_arm.get(1, 0)}, control {self.n_per_arm.get(0, 0)})",
            f"visits: {self.n_visits}",
            f"missing fraction: {self.missing_fraction:.4f}",
            "missing by visit: " + ", ".join(f"{v:.4f}" for v in self.missing_by_visit),
        ]
        for arm in (1, 0):
            if arm in self.missing_by_arm:
                lines.append(f"missing fraction arm {arm}: {self.missing_by_arm[arm]:.4f}")
        for arm in (1, 0):
            if arm in self.discontinued_at:
                counts = self.discontinued_at[arm]
                cum = np.cumsum(counts).tolist()
                lines.append(
                    f"discontinued by visit arm {arm}: " + ", ".join(str(c) for c in cum)
                )
        lines.append(f"errors: {len(self.errors)}")
        lines += [f"  ERROR {pid or '-'} [{rule}] {msg}" for pid, rule, msg in self.errors]
        lines.append(f"warnings: {len(self.warnings)}")
        lines += [f"  WARNING {pid or '-'} [{rule}] {msg}" for pid, rule, msg in self.warnings]
        return "\n".join(lines) + "\n"


def validate(ds: TrialDataset) -> ValidationReport:
    """Check hard rules and summarize missingness. Never raises."""
    rep = ValidationReport(n_patients=ds.n_patients, n_visits=ds.n_visits)
    n, V = ds.outcomes.shape
    seen = set()
    for pid in ds.ids:
        if pid in seen:
            rep.errors.append((pid, "unique-id", "duplicate patient id"))
        seen.add(pid)
    for i, pid in enumerate(ds.ids):
        if ds.arm[i] not in (0, 1):
            rep.errors.append((pid, "binary-arm", f"arm must be 0 or 1, got {ds.arm[i]}"))
        if not np.all(np.isfinite(ds.covariates[i])):
            rep.errors.append((pid, "complete-covariates", "missing or non-finite baseline covariate"))
        if not 0 <= ds.disc_visit[i] <= V:
            rep.errors.append((pid, "disc-range", f"discontinuation visit {ds.disc_visit[i]} outside 0..{V}"))
        if np.any(np.isinf(ds.outcomes[i])):
            rep.errors.append((pid, "finite-outcomes", "infinite outcome value"))
    if n == 0:
        rep.errors.append((None, "non-empty", "dataset has no patients"))
        return rep

    miss = np.isnan(ds.outcomes)
    rep.missing_fraction = float(miss.sum()) / float(n * V)
    rep.missing_by_visit = miss.mean(axis=0).tolist()
    for arm in (1, 0):
        sel = ds.arm == arm
        rep.n_per_arm[arm] = int(sel.sum())
        if sel.any():
            rep.missing_by_arm[arm] = float(miss[sel].mean())
            rep.discontinued_at[arm] = [int(np.sum(ds.disc_visit[sel] == j)) for j in range(V)]
        else:
            rep.warnings.append((None, "both-arms", f"no patients in arm {arm}"))

    off_obs = 0
    for i, pid in enumerate(ds.ids):
        if miss[i].all():
            rep.warnings.append((pid, "no-outcomes", "patient has no observed outcomes"))
        d = int(ds.disc_visit[i])
        off_obs += int((~miss[i, max(d, 1):]).sum())
        if ds.arm[i] == 1 and d == 0 and miss[i, 1:].any():
            rep.warnings.append(
                (pid, "cir-undefined", "active patient never treated with missing post-baseline outcomes; CIR imputation undefined")
            )
    if off_obs:
        rep.warnings.append((None, "off-treatment-data", f"{off_obs} observed post-baseline outcomes after discontinuation"))
    return rep


def change_from_baseline(ds: TrialDataset, baseline_name: str = "baseline") -> TrialDataset:
    """Convert outcomes to change from baseline.

    Visit ``j >= 1`` becomes visit ``j - 1`` of the new dataset with outcome
    ``Y_j - Y_0``; the baseline outcome is appended to the covariates and the
    discontinuation visit shifts down by one (floored at 0).
    """
    if ds.n_visits < 2:
        raise DataError("change from baseline needs at least one post-baseline visit")
    base = ds.outcomes[:, 0]
    bad = [ds.ids[i] for i in np.flatnonzero(np.isnan(base))]
    if bad:
        raise DataError(f"missing baseline outcome for patient(s): {', '.join(bad)}")
    if baseline_name in ds.covariate_names:
        raise DataError(f"covariate {baseline_name!r} already exists")
    return TrialDataset(
        ids=ds.ids,
        arm=ds.arm,
        covariates=np.column_stack([ds.covariates, base]),
        outcomes=ds.outcomes[:, 1:] - base[:, None],
        disc_visit=np.maximum(ds.disc_visit - 1, 0),
        covariate_names=ds.covariate_names + (baseline_name,),
        strata=ds.strata,
        strata_name=ds.strata_name,
    )


def read_trial_csv(path, schema: ColumnSchema = ColumnSchema()) -> TrialDataset:
    with open(path, "rb") as fh:
        return parse_trial_csv(fh.read(), schema)
