"""Treatment-effect estimation on completed data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .dataset import TrialDataset
from .errors import DataError, NumericalError
from .imputation import CompletedDataset, Strategy
from .linalg import DesignMatrix, fit_ols

METHOD_NAMES = {
    Strategy.HYPOTHETICAL: "SLR-H",
    Strategy.J2R: "SLR-J2R",
    Strategy.CIR: "SLR-CIR",
}


@dataclass(frozen=True)
class AnalysisModel:
    """Linear analysis model ``Y_visit ~ 1 + Z + covariates``.

    ``visit=None`` selects the final visit.
    """

    visit: Optional[int] = None
    covariates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def resolve_visit(self, n_visits: int) -> int:
        j = n_visits - 1 if self.visit is None else int(self.visit)
        if not 0 <= j < n_visits:
            raise DataError(f"analysis visit {j} outside 0..{n_visits - 1}")
        return j

    def labels(self) -> tuple:
        return ("intercept", "arm", *self.covariates)

    def design(self, ds: TrialDataset, arm=None) -> np.ndarray:
        """Design matrix; ``arm`` overrides the treatment column (g-computation)."""
        z = ds.arm.astype(float) if arm is None else np.full(ds.n_patients, float(arm))
        return np.column_stack([np.ones(ds.n_patients), z, ds.covariate_matrix(self.covariates)])


@dataclass
class EffectEstimate:
    """Point estimate with optional standard error and confidence interval.

    ``marginal_means`` is ``(active, control)``. ``extra`` carries auxiliary
    output such as the bootstrap normal-approximation interval.
    """

    point: float
    marginal_means: tuple
    se: Optional[float] = None
    ci: Optional[tuple] = None
    ci_level: Optional[float] = None
    method: str = "SLR-CIR"
    inference: str = "none"
    n_resamples: Optional[int] = None
    n_failures: int = 0
    extra: dict = field(default_factory=dict)
    replicates: Optional[object] = None

    def as_dict(self) -> dict:
        out = {
            "method": self.method,
            "inference": self.inference,
            "point": self.point,
            "marginal_mean_active": self.marginal_means[0],
            "marginal_mean_control": self.marginal_means[1],
            "se": self.se,
            "ci_low": None if self.ci is None else self.ci[0],
            "ci_high": None if self.ci is None else self.ci[1],
            "ci_level": self.ci_level,
            "n_resamples": self.n_resamples,
            "n_failures": self.n_failures,
        }
        out.update(self.extra)
        return out


def _fit_and_effects(V: np.ndarray, y: np.ndarray, labels, ds, model):
    coef = fit_ols(DesignMatrix(V, labels), y)
    means = tuple(float(np.mean(model.design(ds, arm=z) @ coef.values)) for z in (1, 0))
    return coef, means


def estimate_effect(cd: CompletedDataset, model: AnalysisModel) -> EffectEstimate:
    """OLS of the completed outcome at ``model.visit`` on ``(1, Z, covariates)``.

    The effect is the coefficient of ``Z``. Marginal means average the fitted
    model over all patients with ``Z`` set to each arm.
    """
    ds = cd.source
    j = model.resolve_visit(ds.n_visits)
    V = model.design(ds)
    coef, means = _fit_and_effects(V, cd.values[:, j], model.labels(), ds, model)
    return EffectEstimate(
        point=coef["arm"],
        marginal_means=means,
        method=METHOD_NAMES[cd.strategy],
    )


def complete_data_estimate(ds: TrialDataset, model: AnalysisModel, alpha: float = 0.05) -> EffectEstimate:
    """Effect from fully observed outcomes at the analysis visit, with a Wald CI."""
    j = model.resolve_visit(ds.n_visits)
    y = ds.outcomes[:, j]
    if np.isnan(y).any():
        raise DataError(f"complete-data estimator needs every outcome at visit {j}")
    V = model.design(ds)
    coef, means = _fit_and_effects(V, y, model.labels(), ds, model)
    n, p = V.shape
    if n <= p:
        raise NumericalError("no residual degrees of freedom for the Wald standard error")
    resid = y - V @ coef.values
    sigma2 = float(resid @ resid) / (n - p)
    R = sla.qr(V, mode="r")[0][:p, :p]
    Rinv = sla.solve_triangular(R, np.eye(p), lower=False)
    cov = sigma2 * Rinv @ Rinv.T
    se = float(np.sqrt(cov[1, 1]))
    point = coef["arm"]
    zq = stats.norm.ppf(1 - alpha / 2)
    return EffectEstimate(
        point=point,
        marginal_means=means,
        se=se,
        ci=(point - zq * se, point + zq * se),
        ci_level=1 - alpha,
        method="CompleteData",
        inference="wald",
    )
