"""Simulated trials and operating characteristics of the estimators.

The data-generating mechanism draws binary baseline covariates, a normal
baseline outcome and an always-treated trajectory from a multivariate
normal whose mean depends on the arm, baseline outcome and covariates.
Treatment discontinuation is simulated visit by visit from a logistic
retention model. After discontinuation the active arm's outcomes are moved
to the reference mean profile (J2R or CIR) while keeping the drawn residual,
so the data satisfy the reference-based assumption exactly. Two missingness
sources follow: withdrawal at discontinuation and independent cell deletion.
"""

from __future__ import annotations

import io
import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml

from .analysis import AnalysisModel, complete_data_estimate
from .dataset import TrialDataset
from .errors import SimulationError, SlrImputeError
from .imputation import Strategy
from .inference import PipelineSpec, bootstrap, jackknife
from .linalg import cholesky

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = (
    (4.28, 4.02, 4.29, 4.58, 4.73),
    (4.02, 8.41, 7.87, 8.13, 8.22),
    (4.29, 7.87, 14.21, 13.97, 13.87),
    (4.58, 8.13, 13.97, 20.43, 20.44),
    (4.73, 8.22, 13.87, 20.44, 24.70),
)
DEFAULT_MEAN_CONTROL = (0.41, 1.29, 2.17, 3.33, 4.05)
DEFAULT_MEAN_ACTIVE = (0.41, 1.22, 1.83, 2.55, 3.10)
# true_estimands(method="conditional", n_mc=10**7): MC standard error below 1e-5
DEFAULT_POLICY_TRUTH = {Strategy.CIR: -0.78970, Strategy.J2R: -0.72112}


@dataclass(frozen=True)
class Scenario:
    """Parameters of the data-generating mechanism.

    Retention (staying on treatment at visit ``j`` given on treatment at
    ``j - 1``) has logit
    ``retention_intercept + retention_prev_coef * Y_{j-1} + retention_baseline_coef * Y_0``
    for ``j >= first_disc_visit``; earlier visits have retention 1.
    """

    name: str = "setting-1"
    n_per_arm: int = 500
    covariate_names: tuple = ("X1", "X2", "X3")
    covariate_probs: tuple = (0.7, 0.7, 0.4)
    baseline_mean: float = 3.84
    baseline_sd: float = 1.64
    mean_control: tuple = DEFAULT_MEAN_CONTROL
    mean_active: tuple = DEFAULT_MEAN_ACTIVE
    baseline_coef: float = 0.03
    covariate_coefs: tuple = (-0.02, 0.45, -0.82)
    sigma: tuple = DEFAULT_SIGMA
    retention_intercept: float = 2.75
    retention_prev_coef: float = -0.04
    retention_baseline_coef: float = -0.01
    first_disc_visit: int = 2
    withdrawal_prob: float = 0.75
    cell_missing_prob: float = 0.05
    truth: Strategy = Strategy.CIR
    policy_truth: Optional[float] = None

    def __post_init__(self):
        for name in ("covariate_names", "covariate_probs", "mean_control", "mean_active", "covariate_coefs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "sigma", tuple(tuple(float(v) for v in row) for row in self.sigma))
        object.__setattr__(self, "truth", Strategy.parse(self.truth))
        M = self.n_post_visits
        if len(self.mean_active) != M:
            raise SimulationError("mean_active and mean_control must have equal length")
        if np.asarray(self.sigma).shape != (M, M):
            raise SimulationError(f"sigma must be {M}x{M}")
        if not (len(self.covariate_names) == len(self.covariate_probs) == len(self.covariate_coefs)):
            raise SimulationError("covariate names, probabilities and coefficients must align")
        probs = [*self.covariate_probs, self.withdrawal_prob, self.cell_missing_prob]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise SimulationError("probabilities must lie in [0, 1]")
        if self.truth is Strategy.HYPOTHETICAL:
            raise SimulationError("truth assumption must be cir or j2r")
        if not 1 <= self.first_disc_visit:
            raise SimulationError("first_disc_visit must be >= 1")
        if self.n_per_arm < 1:
            raise SimulationError("n_per_arm must be positive")
        cholesky(np.asarray(self.sigma))  # raises NotPositiveDefiniteError with the pivot

    @property
    def n_post_visits(self) -> int:
        return len(self.mean_control)

    @property
    def is_null(self) -> bool:
        return self.mean_active == self.mean_control

    @property
    def hypothetical_truth(self) -> float:
        return float(self.mean_active[-1] - self.mean_control[-1])

    @property
    def chol(self) -> np.ndarray:
        return cholesky(np.asarray(self.sigma))

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["truth"] = self.truth.value
        d["sigma"] = [list(r) for r in self.sigma]
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = list(v)
        if d["policy_truth"] is None:
            del d["policy_truth"]
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise SimulationError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**mapping)


def builtin_scenario(setting: int, n_per_arm: int = 500) -> Scenario:
    """Settings 1-4: CIR non-null, CIR null, J2R non-null, J2R null."""
    if setting not in (1, 2, 3, 4):
        raise ValueError("setting must be 1, 2, 3 or 4")
    truth = Strategy.CIR if setting in (1, 2) else Strategy.J2R
    null = setting in (2, 4)
    return Scenario(
        name=f"setting-{setting}",
        n_per_arm=n_per_arm,
        mean_active=DEFAULT_MEAN_CONTROL if null else DEFAULT_MEAN_ACTIVE,
        truth=truth,
        policy_truth=0.0 if null else DEFAULT_POLICY_TRUTH[truth],
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        mapping = yaml.safe_load(fh)
    if not isinstance(mapping, dict):
        raise SimulationError(f"{path}: scenario file must be a mapping")
    return Scenario.from_mapping(mapping)


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_mapping(), sort_keys=False, default_flow_style=None)


def sample_mvn(mean, chol_lower, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """``mean + L @ z`` with iid standard normal ``z``; ``size`` stacks draws in rows."""
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(chol_lower, dtype=float)
    if L.shape != (mean.shape[-1], mean.shape[-1]):
        raise ValueError("mean and Cholesky factor dimensions disagree")
    shape = (mean.shape[-1],) if size is None else (size, mean.shape[-1])
    return mean + rng.standard_normal(shape) @ L.T


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def _retention(sc: Scenario, always: np.ndarray, j: int) -> np.ndarray:
    """P(on treatment at visit j | on treatment at j - 1, always-treated history)."""
    logit = sc.retention_intercept + sc.retention_prev_coef * always[:, j - 1] + sc.retention_baseline_coef * always[:, 0]
    return 1.0 / (1.0 + np.exp(-logit))


def _effect_profile(sc: Scenario) -> np.ndarray:
    """Always-treated mean difference by visit, 0 at baseline."""
    return np.concatenate([[0.0], np.asarray(sc.mean_active) - np.asarray(sc.mean_control)])


def _draw_patients(sc: Scenario, arm: np.ndarray, rng: np.random.Generator, L: np.ndarray) -> dict:
    """Covariates, always-treated and reference-shifted outcomes, and D.

    Columns of the outcome matrices are visits ``0..M`` (visit 0 = baseline).
    """
    n = arm.size
    M = sc.n_post_visits
    q = len(sc.covariate_names)
    X = (rng.random((n, q)) < np.asarray(sc.covariate_probs)).astype(float)
    y0 = sc.baseline_mean + sc.baseline_sd * rng.standard_normal(n)
    lam = np.where(arm[:, None] == 1, np.asarray(sc.mean_active), np.asarray(sc.mean_control))
    shift_cov = sc.baseline_coef * y0 + X @ np.asarray(sc.covariate_coefs)
    resid = sample_mvn(np.zeros(M), L, rng, size=n)
    always = np.column_stack([y0, lam + shift_cov[:, None] + resid])

    u_ret = rng.random((n, M))
    D = np.full(n, M + 1)
    for j in range(sc.first_disc_visit, M + 1):
        stays = u_ret[:, j - 1] < _retention(sc, always, j)
        D = np.where((D == M + 1) & ~stays, j, D)

    # reference-based post-discontinuation outcomes: same residual, reference mean
    effect = _effect_profile(sc)
    visits = np.arange(M + 1)
    after = (arm[:, None] == 1) & (visits[None, :] >= D[:, None])
    if sc.truth is Strategy.CIR:
        kept = effect[np.clip(D - 1, 0, M)]
    else:
        kept = np.zeros(n)
    complete = np.where(after, always - effect[None, :] + kept[:, None], always)
    return {"X": X, "always": always, "complete": complete, "D": D}


@dataclass
class GeneratedPair:
    complete: TrialDataset
    observed: TrialDataset
    always_treated: np.ndarray


def generate(scenario: Scenario, seed) -> GeneratedPair:
    """Simulate one trial. Deterministic in ``(scenario, seed)``."""
    rng = _as_rng(seed)
    n = scenario.n_per_arm
    arm = np.concatenate([np.ones(n, dtype=int), np.zeros(n, dtype=int)])
    d = _draw_patients(scenario, arm, rng, scenario.chol)
    complete = d["complete"]
    M = scenario.n_post_visits
    visits = np.arange(M + 1)
    u_wd = rng.random(2 * n)
    u_cell = rng.random((2 * n, M + 1))
    withdrawn = (d["D"] <= M) & (u_wd < scenario.withdrawal_prob)
    missing = (withdrawn[:, None] & (visits[None, :] >= d["D"][:, None])) | (u_cell < scenario.cell_missing_prob)
    observed = np.where(missing, np.nan, complete)
    ids = [f"S{i:05d}" for i in range(2 * n)]
    kw = dict(ids=ids, arm=arm, covariates=d["X"], disc_visit=d["D"], covariate_names=scenario.covariate_names)
    return GeneratedPair(
        complete=TrialDataset(outcomes=complete, **kw),
        observed=TrialDataset(outcomes=observed, **kw),
        always_treated=d["always"],
    )


class TrueEstimands(NamedTuple):
    hypothetical: float
    policy: float
    policy_mc_se: float


def true_estimands(scenario: Scenario, n_mc: int = 10**7, seed=0, chunk: int = 10**6,
                   method: str = "direct") -> TrueEstimands:
    """Final-visit estimands: hypothetical exactly, treatment policy by Monte Carlo.

    Parameters
    ----------
    n_mc : int
        Simulated patients per arm.
    method : {"direct", "conditional"}
        ``"direct"`` averages simulated final-visit outcomes in each arm.
        ``"conditional"`` uses that the policy effect is the hypothetical
        effect plus ``E[sum_d P(D = d | history) * (kept_d - effect_M)]`` in
        the active arm, where ``kept_d`` is the effect retained after
        discontinuing at ``d`` (CIR) or 0 (J2R). The discontinuation
        probabilities are averaged instead of sampled, which cuts the Monte
        Carlo error by orders of magnitude.
    """
    if method not in ("direct", "conditional"):
        raise ValueError(f"unknown method {method!r}")
    rng = _as_rng(seed)
    L = scenario.chol
    M = scenario.n_post_visits
    if method == "conditional":
        effect = _effect_profile(scenario)
        total = total_sq = 0.0
        left = n_mc
        while left > 0:
            k = min(chunk, left)
            always = _draw_patients(scenario, np.ones(k, dtype=int), rng, L)["always"]
            still_on = np.ones(k)
            gain = np.zeros(k)
            for j in range(scenario.first_disc_visit, M + 1):
                p = _retention(scenario, always, j)
                kept = effect[j - 1] if scenario.truth is Strategy.CIR else 0.0
                gain += still_on * (1.0 - p) * (kept - effect[M])
                still_on *= p
            total += float(gain.sum())
            total_sq += float((gain * gain).sum())
            left -= k
        mean = total / n_mc
        se = float(np.sqrt(max(total_sq / n_mc - mean**2, 0.0) / n_mc))
        return TrueEstimands(scenario.hypothetical_truth, scenario.hypothetical_truth + mean, se)

    sums = {0: 0.0, 1: 0.0}
    sq = {0: 0.0, 1: 0.0}
    for z in (1, 0):
        left = n_mc
        while left > 0:
            k = min(chunk, left)
            d = _draw_patients(scenario, np.full(k, z), rng, L)
            y = d["complete"][:, -1]
            sums[z] += float(y.sum())
            sq[z] += float((y * y).sum())
            left -= k
    means = {z: sums[z] / n_mc for z in (0, 1)}
    var = {z: sq[z] / n_mc - means[z] ** 2 for z in (0, 1)}
    se = float(np.sqrt((var[0] + var[1]) / n_mc))
    return TrueEstimands(scenario.hypothetical_truth, means[1] - means[0], se)


@dataclass(frozen=True)
class MethodSpec:
    """An estimator plus its inference method, as run in a study."""

    pipeline: PipelineSpec
    inference: str = "jackknife"
    boot_samples: int = 1000
    name: Optional[str] = None

    def __post_init__(self):
        if self.inference not in ("jackknife", "bootstrap"):
            raise SimulationError(f"unknown inference {self.inference!r}")
        if self.name is None:
            object.__setattr__(self, "name", f"{self.pipeline.method_name} {self.inference}")


COMPLETE_DATA = "Complete data"


def default_methods(scenario: Scenario, boot_samples: int = 1000, inference=("bootstrap", "jackknife")) -> list:
    pipe = PipelineSpec(
        strategy=scenario.truth,
        imputation_covariates=scenario.covariate_names,
        model=AnalysisModel(covariates=scenario.covariate_names),
    )
    return [MethodSpec(pipe, inf, boot_samples) for inf in inference]


def _complete_data_effect(ds: TrialDataset, alpha: float):
    with_base = TrialDataset(
        ds.ids, ds.arm, np.column_stack([ds.covariates, ds.outcomes[:, 0]]), ds.outcomes, ds.disc_visit,
        ds.covariate_names + ("Y0",),
    )
    return complete_data_estimate(with_base, AnalysisModel(covariates=with_base.covariate_names), alpha)


def replicate_seed(seed: int, replicate: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(replicate, stream))


def run_replicate(scenario: Scenario, methods: Sequence[MethodSpec], seed: int, r: int, alpha: float = 0.05) -> dict:
    """Generate replicate ``r`` and apply every method. Returns per-method rows."""
    pair = generate(scenario, replicate_seed(seed, r, 0))
    boot_seed = int(replicate_seed(seed, r, 1).generate_state(1)[0])
    out = {"rows": {}, "seconds": {}, "missing_fraction": float(np.isnan(pair.observed.outcomes).mean())}
    t0 = time.perf_counter()
    est = _complete_data_effect(pair.complete, alpha)
    out["rows"][COMPLETE_DATA] = (est.point, est.ci[0], est.ci[1], None)
    out["seconds"][COMPLETE_DATA] = time.perf_counter() - t0
    for meth in methods:
        t0 = time.perf_counter()
        try:
            if meth.inference == "jackknife":
                est = jackknife(pair.observed, meth.pipeline, alpha=alpha)
            else:
                est = bootstrap(pair.observed, meth.pipeline, m=meth.boot_samples, seed=boot_seed, alpha=alpha)
            out["rows"][meth.name] = (est.point, est.ci[0], est.ci[1], None)
        except SlrImputeError as exc:
            out["rows"][meth.name] = (np.nan, np.nan, np.nan, str(exc))
        out["seconds"][meth.name] = time.perf_counter() - t0
    return out


@dataclass
class MethodSummary:
    method: str
    bias: float
    rmse: float
    coverage: float
    rejection_rate: float
    mean_ci_width: float
    n_replicates: int
    n_failures: int
    mean_estimate: float


@dataclass
class SimulationReport:
    """Operating characteristics per method.

    ``rejection_rate`` is power for non-null scenarios and type I error for
    null ones. ``seconds`` holds wall-clock totals and is kept out of the
    formatted outputs so those stay reproducible byte for byte.
    """

    scenario: Scenario
    truth: float
    n_sims: int
    seed: int
    alpha: float
    summaries: list
    estimates: dict
    missing_fraction: float
    seconds: dict = field(default_factory=dict)

    @property
    def null(self) -> bool:
        return self.scenario.is_null

    def summary(self, method: str) -> MethodSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "bias", "rmse", "coverage", "power", "type_i_error", "mean_ci_width",
                    "mean_estimate", "n_replicates", "n_failures"])
        for s in self.summaries:
            w.writerow([
                s.method, f"{s.bias:.6f}", f"{s.rmse:.6f}", f"{s.coverage:.4f}",
                "" if self.null else f"{s.rejection_rate:.4f}",
                f"{s.rejection_rate:.4f}" if self.null else "",
                f"{s.mean_ci_width:.6f}", f"{s.mean_estimate:.6f}", s.n_replicates, s.n_failures,
            ])
        return buf.getvalue()

    def format_table(self) -> str:
        head = f"{'Method':<28}{'Bias':>9}{'RMSE':>9}{'Coverage':>10}{'Power':>9}{'Type I':>9}"
        lines = [
            f"Scenario: {self.scenario.name} (truth {self.scenario.truth.value}, "
            f"{'null' if self.null else 'non-null'} effect)",
            f"Treatment policy truth: {self.truth:.4f}; replicates: {self.n_sims}; seed: {self.seed}",
            f"Observed missingness: {100 * self.missing_fraction:.2f}%",
            head,
            "-" * len(head),
        ]
        for s in self.summaries:
            power = "-" if self.null else f"{100 * s.rejection_rate:.1f}%"
            t1 = f"{100 * s.rejection_rate:.1f}%" if self.null else "-"
            lines.append(
                f"{s.method:<28}{s.bias:>9.3f}{s.rmse:>9.3f}{100 * s.coverage:>9.1f}%{power:>9}{t1:>9}"
            )
        return "\n".join(lines) + "\n"

    def replicates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "method", "estimate", "ci_low", "ci_high", "error"])
        for name, rows in self.estimates.items():
            for r, (pt, lo, hi, err) in enumerate(rows):
                fmt = lambda v: "NA" if v is None or np.isnan(v) else repr(float(v))
                w.writerow([r, name, fmt(pt), fmt(lo), fmt(hi), err or ""])
        return buf.getvalue()


def _summarise(name, rows, truth, n_sims) -> MethodSummary:
    arr = np.array([r[:3] for r in rows], dtype=float)
    good = ~np.isnan(arr[:, 0])
    est, lo, hi = arr[good].T
    err = est - truth
    return MethodSummary(
        method=name,
        bias=float(err.mean()),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        coverage=float(np.mean((lo <= truth) & (truth <= hi))),
        rejection_rate=float(np.mean((lo > 0) | (hi < 0))),
        mean_ci_width=float(np.mean(hi - lo)),
        n_replicates=int(good.sum()),
        n_failures=int((~good).sum()),
        mean_estimate=float(est.mean()),
    )


def run_study(scenario: Scenario, n_sims: int, methods: Optional[Sequence[MethodSpec]] = None, seed: int = 0,
              truth: Optional[float] = None, alpha: float = 0.05, workers: int = 1,
              n_mc: int = 10**6, failure_tolerance: float = 0.01) -> SimulationReport:
    """Run ``n_sims`` replicates and summarise bias, RMSE, coverage and rejection rates.

    The treatment-policy truth is, in order of preference, the ``truth``
    argument, ``scenario.policy_truth``, or a ``true_estimands`` Monte Carlo
    run with ``n_mc`` patients per arm.
    """
    if n_sims < 1:
        raise SimulationError("n_sims must be positive")
    methods = default_methods(scenario) if methods is None else list(methods)
    names = [COMPLETE_DATA] + [m.name for m in methods]
    if len(set(names)) != len(names):
        raise SimulationError("method names must be unique")
    if truth is None:
        truth = scenario.policy_truth
    if truth is None:
        truth = 0.0 if scenario.is_null else true_estimands(scenario, n_mc=n_mc, seed=seed).policy
    t0 = time.perf_counter()
    # replicate r depends only on (seed, r), so the thread count cannot change results
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda r: run_replicate(scenario, methods, seed, r, alpha), range(n_sims)))
    else:
        results = [run_replicate(scenario, methods, seed, r, alpha) for r in range(n_sims)]
    estimates = {name: [res["rows"][name] for res in results] for name in names}
    seconds = {name: float(sum(res["seconds"][name] for res in results)) for name in names}
    seconds["total"] = time.perf_counter() - t0
    for name, rows in estimates.items():
        failed = [(r, row[3]) for r, row in enumerate(rows) if row[3] is not None]
        if len(failed) > failure_tolerance * n_sims:
            raise SimulationError(
                f"{name}: {len(failed)} of {n_sims} replicates failed; first: replicate {failed[0][0]}: {failed[0][1]}"
            )
    summaries = [_summarise(name, estimates[name], truth, n_sims) for name in names]
    return SimulationReport(
        scenario=scenario,
        truth=float(truth),
        n_sims=n_sims,
        seed=seed,
        alpha=alpha,
        summaries=summaries,
        estimates=estimates,
        missing_fraction=float(np.mean([res["missing_fraction"] for res in results])),
        seconds=seconds,
    )
