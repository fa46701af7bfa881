"""Sequential linear regression imputation under hypothetical, J2R and CIR.

For each visit ``j`` and arm ``z`` two regressions are fitted:

* a conditional model of ``Y_j`` on ``(1, X, Y^H_0..Y^H_{j-1})`` among arm-``z``
  patients observed at ``j`` and still on treatment (``D > j``);
* a marginal model of the completed hypothetical outcome ``Y^H_j`` on
  ``(1, X)`` over all arm-``z`` patients, giving the always-treated mean
  ``mu_j(z)`` for each patient.

Missing values are then replaced by conditional means, one visit at a time.
Reference-based strategies replace active-arm outcomes after
discontinuation with the control-arm conditional model re-centred on the
reference mean profile (jump to reference, or copy increments).
"""

from __future__ import annotations

import enum
import io
import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import TrialDataset
from .errors import ImputationError, InsufficientDataError, NumericalError
from .linalg import Coefficients, DesignMatrix, fit_ols

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    HYPOTHETICAL = "hypothetical"
    J2R = "j2r"
    CIR = "cir"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"h": "hypothetical", "mar": "hypothetical", "j2f": "j2r"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown strategy {value!r}; choose from hypothetical, j2r, cir") from None


class Provenance(enum.IntEnum):
    OBSERVED_USED = 0
    IMPUTED_ON_TREATMENT = 1  # own-arm conditional model
    IMPUTED_REFERENCE = 2  # reference-based formula after discontinuation
    OBSERVED_OVERWRITTEN = 3  # off-treatment observation replaced (hypothetical only)


def history_labels(covariates: Sequence[str], visit: int) -> tuple:
    return ("intercept", *covariates, *(f"Y_{k}" for k in range(visit)))


@dataclass
class FittedSlrModels:
    """Per-visit, per-arm regression coefficients.

    ``conditional[(j, z)]`` has ``1 + q + j`` coefficients ordered as
    intercept, covariates, then ``Y_0..Y_{j-1}``; ``marginal[(j, z)]`` has
    ``1 + q``.
    """

    covariates: tuple
    n_visits: int
    conditional: dict
    marginal: dict
    n_used: dict = field(default_factory=dict)

    def beta_prime(self, j: int, z: int) -> np.ndarray:
        """Coefficients on ``(1, X)`` in the conditional model."""
        return self.conditional[(j, z)].values[: 1 + len(self.covariates)]

    def beta(self, j: int, z: int) -> np.ndarray:
        """Coefficients on the outcome history ``Y_0..Y_{j-1}``."""
        return self.conditional[(j, z)].values[1 + len(self.covariates) :]

    def beta_star(self, j: int, z: int) -> np.ndarray:
        return self.marginal[(j, z)].values

    @property
    def underpowered(self) -> list:
        """Regressions fitted with no residual degrees of freedom beyond one."""
        out = []
        for (j, z), c in self.conditional.items():
            if c.n_obs_used < c.values.size + 1:
                out.append((j, z, c.n_obs_used, c.values.size))
        return out

    def marginal_means(self, Xc: np.ndarray) -> np.ndarray:
        """``mu[i, j, z]`` for every patient, visit and arm."""
        mu = np.empty((Xc.shape[0], self.n_visits, 2))
        for j in range(self.n_visits):
            for z in (0, 1):
                mu[:, j, z] = Xc @ self.beta_star(j, z)
        return mu


@dataclass
class CompletedDataset:
    strategy: Strategy
    values: np.ndarray
    provenance: np.ndarray
    source: TrialDataset

    def __post_init__(self):
        self.values.flags.writeable = False
        self.provenance.flags.writeable = False

    def to_csv(self) -> str:
        """Long-format audit table with one provenance label per cell."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient", "visit", "arm", "value", "provenance"])
        src = self.source
        for i, pid in enumerate(src.ids):
            for j in range(src.n_visits):
                w.writerow([pid, j, int(src.arm[i]), repr(float(self.values[i, j])),
                            Provenance(self.provenance[i, j]).name.lower()])
        return buf.getvalue()


def _intercept_design(ds: TrialDataset, covariates: Sequence[str]) -> np.ndarray:
    return np.column_stack([np.ones(ds.n_patients), ds.covariate_matrix(covariates)])


def _fit(A, y, labels, what):
    try:
        return fit_ols(DesignMatrix(A, labels), y)
    except NumericalError as exc:
        exc.args = (f"{what}: {exc.args[0]}",) + exc.args[1:]
        exc.module = "imputation"
        raise


def fit_slr_models(ds: TrialDataset, covariate_selection: Optional[Sequence[str]] = None) -> FittedSlrModels:
    """Fit the conditional and marginal regressions visit by visit.

    ``covariate_selection`` defaults to every covariate in the dataset.

    Raises
    ------
    InsufficientDataError
        When a visit/arm has fewer on-treatment complete cases than
        coefficients.
    RankDeficiencyError
        Propagated from the least-squares solver, with visit and arm named.
    """
    covs = tuple(ds.covariate_names if covariate_selection is None else covariate_selection)
    Xc = _intercept_design(ds, covs)
    Y, R, D, Z = ds.outcomes, ds.observed, ds.disc_visit, ds.arm
    n, V = Y.shape
    YH = np.empty((n, V))
    cond, marg, n_used = {}, {}, {}
    base_labels = ("intercept", *covs)
    for j in range(V):
        # baseline is pre-treatment, so on-treatment status does not restrict it
        on_trt = D > j if j > 0 else np.ones(n, dtype=bool)
        use_obs = R[:, j] & on_trt
        labels = history_labels(covs, j)
        A_all = np.column_stack([Xc, YH[:, :j]])
        for z in (0, 1):
            arm = Z == z
            rows = arm & use_obs
            what = f"visit {j}, arm {z}"
            if rows.sum() < len(labels):
                err = InsufficientDataError(
                    f"{what}: insufficient complete cases ({int(rows.sum())} on-treatment "
                    f"observations for {len(labels)} coefficients)"
                )
                err.module = "imputation"
                raise err
            c = _fit(A_all[rows], Y[rows, j], labels, what)
            cond[(j, z)] = c
            n_used[("conditional", j, z)] = int(rows.sum())
            YH[arm, j] = np.where(use_obs[arm], Y[arm, j], A_all[arm] @ c.values)
        for z in (0, 1):
            arm = Z == z
            marg[(j, z)] = _fit(Xc[arm], YH[arm, j], base_labels, f"visit {j}, arm {z} marginal mean")
            n_used[("marginal", j, z)] = int(arm.sum())
    models = FittedSlrModels(covs, V, cond, marg, n_used)
    for j, z, used, p in models.underpowered:
        logger.warning("visit %d arm %d: conditional model fitted on %d cases for %d coefficients", j, z, used, p)
    return models


def _check_models(ds, m):
    if m.n_visits != ds.n_visits:
        raise ImputationError(f"models fitted for {m.n_visits} visits, dataset has {ds.n_visits}")


def impute_hypothetical(ds: TrialDataset, m: FittedSlrModels) -> CompletedDataset:
    """Hypothetical-strategy completion: off-treatment values are replaced."""
    _check_models(ds, m)
    Xc = _intercept_design(ds, m.covariates)
    Y, R, D, Z = ds.outcomes, ds.observed, ds.disc_visit, ds.arm
    n, V = Y.shape
    YH = np.empty((n, V))
    prov = np.empty((n, V), dtype=np.int8)
    for j in range(V):
        keep = R[:, j] & (D > j) if j > 0 else R[:, 0]
        A = np.column_stack([Xc, YH[:, :j]])
        pred = np.where(Z == 1, A @ m.conditional[(j, 1)].values, A @ m.conditional[(j, 0)].values)
        YH[:, j] = np.where(keep, Y[:, j], pred)
        prov[:, j] = np.where(
            keep, Provenance.OBSERVED_USED,
            np.where(R[:, j], Provenance.OBSERVED_OVERWRITTEN, Provenance.IMPUTED_ON_TREATMENT),
        )
    return CompletedDataset(Strategy.HYPOTHETICAL, YH, prov, ds)


def _impute_reference(ds: TrialDataset, m: FittedSlrModels, strategy: Strategy) -> CompletedDataset:
    _check_models(ds, m)
    Xc = _intercept_design(ds, m.covariates)
    Y, R, D, Z = ds.outcomes, ds.observed, ds.disc_visit, ds.arm
    n, V = Y.shape
    active = Z == 1
    mu = m.marginal_means(Xc)
    visits = np.arange(V)

    if strategy is Strategy.CIR:
        needs_ref = active[:, None] & ~R & (visits[None, :] >= np.maximum(D, 1)[:, None])
        never_treated = needs_ref.any(axis=1) & (D == 0)
        if never_treated.any():
            bad = [ds.ids[i] for i in np.flatnonzero(never_treated)]
            raise ImputationError(
                "CIR undefined for active patients with D = 0 and missing post-baseline "
                f"outcomes (no last on-treatment visit): {', '.join(bad)}; recode them"
            )
        last_on = np.clip(D - 1, 0, V - 1)
        idx = np.arange(n)
        shift = mu[idx, last_on, 1] - mu[idx, last_on, 0]
        shift = np.where((D >= 1) & (D <= V - 1), shift, 0.0)
    else:
        shift = np.zeros(n)
    # reference mean profile: always-treated active means before D, control means (+ CIR offset) from D
    mu_ref = np.where(visits[None, :] < D[:, None], mu[:, :, 1], mu[:, :, 0] + shift[:, None])

    hyp = impute_hypothetical(ds, m)
    Yc = np.empty((n, V))
    prov = np.empty((n, V), dtype=np.int8)
    Yc[:, 0] = hyp.values[:, 0]
    prov[:, 0] = hyp.provenance[:, 0]
    for j in range(1, V):
        A = np.column_stack([Xc, Yc[:, :j]])
        own = np.where(active, A @ m.conditional[(j, 1)].values, A @ m.conditional[(j, 0)].values)
        ref = (Yc[:, :j] - mu_ref[:, :j]) @ m.beta(j, 0) + mu[:, j, 0] + shift
        use_ref = active & (D <= j)
        Yc[:, j] = np.where(R[:, j], Y[:, j], np.where(use_ref, ref, own))
        prov[:, j] = np.where(
            R[:, j], Provenance.OBSERVED_USED,
            np.where(use_ref, Provenance.IMPUTED_REFERENCE, Provenance.IMPUTED_ON_TREATMENT),
        )
    return CompletedDataset(strategy, Yc, prov, ds)


def impute_j2r(ds: TrialDataset, m: FittedSlrModels) -> CompletedDataset:
    """Jump to reference: after discontinuation the active arm follows control means."""
    return _impute_reference(ds, m, Strategy.J2R)


def impute_cir(ds: TrialDataset, m: FittedSlrModels) -> CompletedDataset:
    """Copy increments in reference: the effect at the last on-treatment visit is kept."""
    return _impute_reference(ds, m, Strategy.CIR)


def impute(ds: TrialDataset, m: FittedSlrModels, strategy) -> CompletedDataset:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.HYPOTHETICAL:
        return impute_hypothetical(ds, m)
    return _impute_reference(ds, m, strategy)
