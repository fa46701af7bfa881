"""Jackknife and stratified bootstrap inference for the full pipeline.

Every resample refits all regressions (conditional and marginal models)
before imputing and re-estimating the effect. Replicates are evaluated in
fixed-size chunks; the chunk layout never depends on the worker count, so
results are bit-identical for any ``workers`` value.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from ._batched import BatchedPipeline
from .analysis import METHOD_NAMES, AnalysisModel, EffectEstimate, estimate_effect
from .dataset import TrialDataset
from .errors import InferenceError, SlrImputeError
from .imputation import Strategy, fit_slr_models, impute

logger = logging.getLogger(__name__)

CHUNK_SIZE = 100
BOOTSTRAP_FAILURE_TOLERANCE = 0.01


@dataclass(frozen=True)
class PipelineSpec:
    """The estimator resampled as a whole: fit, impute, analyse."""

    strategy: Strategy = Strategy.CIR
    imputation_covariates: Optional[tuple] = None
    model: AnalysisModel = field(default_factory=AnalysisModel)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.imputation_covariates is not None:
            object.__setattr__(self, "imputation_covariates", tuple(self.imputation_covariates))

    @property
    def method_name(self) -> str:
        return METHOD_NAMES[self.strategy]

    def run(self, ds: TrialDataset) -> EffectEstimate:
        models = fit_slr_models(ds, self.imputation_covariates)
        return estimate_effect(impute(ds, models, self.strategy), self.model)

    def batched(self, ds: TrialDataset) -> BatchedPipeline:
        return BatchedPipeline(ds, self.strategy, self.imputation_covariates, self.model)


@dataclass
class ResampleResult:
    """Per-replicate estimates. ``estimates[k]`` belongs to ``index[k]``."""

    method: str
    estimates: np.ndarray
    index: np.ndarray
    failures: list
    n_intended: int
    seed: Optional[int] = None

    def to_csv(self) -> str:
        lines = ["replicate,estimate"]
        est = dict(zip(self.index.tolist(), self.estimates.tolist()))
        for r in range(self.n_intended):
            lines.append(f"{r},{repr(est[r]) if r in est else 'NA'}")
        return "\n".join(lines) + "\n"


def jackknife_se(estimates) -> float:
    """``sqrt((n - 1) / n * sum((t_i - mean(t))**2))``."""
    t = np.asarray(estimates, dtype=float)
    n = t.size
    if n < 2:
        raise InferenceError("jackknife needs at least two leave-one-out estimates")
    return float(np.sqrt((n - 1) / n * np.sum((t - t.mean()) ** 2)))


def normal_interval(point: float, se: float, alpha: float) -> tuple:
    zq = float(stats.norm.ppf(1 - alpha / 2))
    return (float(point - zq * se), float(point + zq * se))


def percentile_interval(estimates, alpha: float) -> tuple:
    """Percentile interval; quantiles interpolate linearly between order statistics (type 7)."""
    lo, hi = np.quantile(np.asarray(estimates, dtype=float), [alpha / 2, 1 - alpha / 2], method="linear")
    return (float(lo), float(hi))


def _run_chunks(pipe: BatchedPipeline, weight_chunk, n_rep: int, workers: int):
    starts = list(range(0, n_rep, CHUNK_SIZE))

    def task(s):
        return pipe.run(weight_chunk(s, min(s + CHUNK_SIZE, n_rep)))

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(task, starts))
    else:
        parts = [task(s) for s in starts]
    theta = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[2] for p in parts])
    return theta, ok


def _failure_message(spec: PipelineSpec, ds: TrialDataset) -> str:
    try:
        spec.run(ds)
    except SlrImputeError as exc:
        return str(exc)
    return "numerical failure in resample"


def jackknife_estimates(ds: TrialDataset, spec: PipelineSpec, engine: str = "batched", workers: int = 1) -> ResampleResult:
    n = ds.n_patients
    if n < 2:
        raise InferenceError("jackknife needs at least two patients")
    if engine == "loop":
        theta = np.empty(n)
        for i in range(n):
            try:
                theta[i] = spec.run(ds.drop(i)).point
            except SlrImputeError as exc:
                raise InferenceError(f"leave-one-out refit failed without patient {ds.ids[i]}: {exc}") from exc
    elif engine == "batched":
        pipe = spec.batched(ds)

        def weights(s, e):
            W = np.ones((e - s, n))
            W[np.arange(e - s), np.arange(s, e)] = 0.0
            return W

        theta, ok = _run_chunks(pipe, weights, n, workers)
        if not ok.all():
            i = int(np.flatnonzero(~ok)[0])
            msg = _failure_message(spec, ds.drop(i))
            raise InferenceError(f"leave-one-out refit failed without patient {ds.ids[i]}: {msg}")
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return ResampleResult("jackknife", theta, np.arange(n), [], n)


def jackknife(ds: TrialDataset, spec: PipelineSpec, alpha: float = 0.05, engine: str = "batched",
              workers: int = 1) -> EffectEstimate:
    """Jackknife SE and ``point +/- z * SE`` interval around the full-data estimate."""
    full = spec.run(ds)
    res = jackknife_estimates(ds, spec, engine=engine, workers=workers)
    se = jackknife_se(res.estimates)
    full.se = se
    full.ci = normal_interval(full.point, se, alpha)
    full.ci_level = 1 - alpha
    full.inference = "jackknife"
    full.n_resamples = ds.n_patients
    full.replicates = res
    return full


def bootstrap_cells(ds: TrialDataset) -> list:
    """Patient indices per (arm, stratum) cell, in a fixed order."""
    strata = ds.strata if ds.strata is not None else ("",) * ds.n_patients
    keys = sorted({(int(a), s) for a, s in zip(ds.arm, strata)})
    arr_strata = np.array(strata, dtype=object)
    return [np.flatnonzero((ds.arm == a) & (arr_strata == s)) for a, s in keys]


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replicate,))))


def bootstrap_counts(ds: TrialDataset, seed: int, replicate: int, cells=None) -> np.ndarray:
    """How often each patient appears in bootstrap replicate ``replicate``."""
    cells = bootstrap_cells(ds) if cells is None else cells
    rng = replicate_rng(seed, replicate)
    counts = np.zeros(ds.n_patients)
    for idx in cells:
        draw = idx[rng.integers(0, idx.size, size=idx.size)]
        counts += np.bincount(draw, minlength=ds.n_patients)
    return counts


def bootstrap_estimates(ds: TrialDataset, spec: PipelineSpec, m: int = 1000, seed: int = 0,
                        engine: str = "batched", workers: int = 1) -> ResampleResult:
    if m < 1:
        raise InferenceError("bootstrap needs m >= 1")
    cells = bootstrap_cells(ds)
    if any(idx.size == 0 for idx in cells):  # pragma: no cover - cells are built from members
        raise InferenceError("empty bootstrap cell")
    theta = np.full(m, np.nan)
    failures = []
    if engine == "loop":
        for r in range(m):
            counts = bootstrap_counts(ds, seed, r, cells)
            try:
                theta[r] = spec.run(ds.take(np.repeat(np.arange(ds.n_patients), counts.astype(int)))).point
            except SlrImputeError as exc:
                failures.append((r, str(exc)))
    elif engine == "batched":
        pipe = spec.batched(ds)

        def weights(s, e):
            return np.stack([bootstrap_counts(ds, seed, r, cells) for r in range(s, e)])

        theta, ok = _run_chunks(pipe, weights, m, workers)
        for r in np.flatnonzero(~ok):
            counts = bootstrap_counts(ds, seed, int(r), cells)
            msg = _failure_message(spec, ds.take(np.repeat(np.arange(ds.n_patients), counts.astype(int))))
            failures.append((int(r), msg))
    else:
        raise ValueError(f"unknown engine {engine!r}")
    good = ~np.isnan(theta)
    if len(failures) > BOOTSTRAP_FAILURE_TOLERANCE * m:
        first = "; ".join(f"#{r}: {msg}" for r, msg in failures[:3])
        raise InferenceError(
            f"{len(failures)} of {m} bootstrap replicates failed (tolerance "
            f"{BOOTSTRAP_FAILURE_TOLERANCE:.0%}); first failures: {first}"
        )
    if failures:
        logger.warning("%d of %d bootstrap replicates failed and were excluded", len(failures), m)
    return ResampleResult("bootstrap", theta[good], np.flatnonzero(good), failures, m, seed)


def bootstrap(ds: TrialDataset, spec: PipelineSpec, m: int = 1000, seed: int = 0, alpha: float = 0.05,
              engine: str = "batched", workers: int = 1) -> EffectEstimate:
    """Stratified nonparametric bootstrap.

    Patients are resampled with replacement within each arm x stratum cell.
    The main interval is the percentile interval; the normal-approximation
    interval ``point +/- z * sd`` is reported in ``extra``.
    """
    full = spec.run(ds)
    res = bootstrap_estimates(ds, spec, m=m, seed=seed, engine=engine, workers=workers)
    t = res.estimates
    sd = float(np.std(t, ddof=1)) if t.size > 1 else 0.0
    full.se = sd
    full.ci = percentile_interval(t, alpha)
    full.ci_level = 1 - alpha
    full.inference = "bootstrap-percentile"
    full.n_resamples = m
    full.n_failures = len(res.failures)
    lo, hi = normal_interval(full.point, sd, alpha)
    full.extra.update({"ci_normal_low": lo, "ci_normal_high": hi, "seed": seed})
    full.replicates = res
    return full
