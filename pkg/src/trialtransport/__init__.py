"""Transport randomized-trial treatment effects to target populations using
per-arm survival forests, with a weighting comparator and synthetic oracles."""

__version__ = "0.1.0"

from .data_model import (
    AlignmentError, AlignmentReport, Cohort, CohortError, Covariate,
    CovariateSchema, SchemaError, SubjectRecord, align_schemas, compute_smd,
    design_matrix, eligibility_filter, evaluate_predicate, read_cohort_csv,
    read_schema_json, smd_table, write_cohort_csv, write_schema_json,
)
from .estimates import Contrast, ContrastEstimate, all_contrasts
from .km import KmCurve, km_fit, km_fit_cohort, risk_at, sate_contrast
from .survival_forest import (
    FitError, ForestParams, SurvivalForest, SurvivalTree, logrank_statistic,
)
from .engine import (
    ArmModelSet, BootstrapResult, CounterfactualGrid, SubgroupEstimate,
    bootstrap_estimates, counterfactual_grid, fit_arm_models, ite,
    oob_counterfactual_grid, oob_retranslate, subgroup_tate, tate,
)
from .weighting import (
    SelectionModel, SelectionParams, WeightSet, compute_weights,
    fit_selection_model, weighted_contrast,
)
from .synthgen import (
    BUILTIN_SCENARIOS, CovariateDist, OracleTruth, Scenario, generate,
    scenario_s1, scenario_s2,
)
from .report import TransportReport

__all__ = [name for name in dir() if not name.startswith("_")]
