"""Conditional mean imputation of longitudinal outcomes by sequential linear regression.

Supports hypothetical (MAR), jump-to-reference and copy-increments-in-reference
strategies, jackknife and stratified bootstrap inference, and a simulation
harness for operating characteristics.
"""

__version__ = "0.1.0"

from .analysis import AnalysisModel, EffectEstimate, complete_data_estimate, estimate_effect
from .dataset import (
    ColumnSchema,
    PatientRecord,
    TrialDataset,
    ValidationReport,
    change_from_baseline,
    parse_trial_csv,
    read_trial_csv,
    to_csv,
    validate,
)
from .errors import (
    DataError,
    ImputationError,
    InferenceError,
    InsufficientDataError,
    NotPositiveDefiniteError,
    NumericalError,
    RankDeficiencyError,
    SimulationError,
    SlrImputeError,
)
from .imputation import (
    CompletedDataset,
    FittedSlrModels,
    Provenance,
    Strategy,
    fit_slr_models,
    impute,
    impute_cir,
    impute_hypothetical,
    impute_j2r,
)
from .inference import PipelineSpec, ResampleResult, bootstrap, jackknife
from .simulation import (
    GeneratedPair,
    MethodSpec,
    Scenario,
    SimulationReport,
    TrueEstimands,
    builtin_scenario,
    generate,
    load_scenario,
    run_study,
    sample_mvn,
    true_estimands,
)
