"""Double/debiased machine learning with stacked nuisance learners."""

from .core_data import Dataset, TransformPlan, apply_transform, fit_transform, load_csv
from .crossfit import (CrossFitMatrix, FoldAssignment, cross_fit, make_folds,
                       repeat_plan)
from .errors import ConfigurationError, DataError, DdstackError, NumericalError
from .estimators import (NuisanceEstimates, PointEstimate, RepetitionSet,
                         aggregate_repetitions, atet_estimate, plm_estimate)
from .learners import (BUILTIN_LEARNERS, FittedLearner, LearnerSpec, fit,
                       make_spec, oracle_learner, predict)
from .pipeline import EstimatorSettings, RunResult, ddml_atet, ddml_plm
from .simulation import (DgpSpec, EstimatorConfig, SimulationReport,
                         calibrate_generative, calibrate_toy_scale, generate,
                         run_monte_carlo, toy_spec)
from .stacking import (StackingWeights, cls_solve, final_learn,
                       project_to_simplex, stack, stack_conventional,
                       stack_pooled, stack_short)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "TransformPlan", "apply_transform", "fit_transform", "load_csv",
    "CrossFitMatrix", "FoldAssignment", "cross_fit", "make_folds",
    "repeat_plan",
    "ConfigurationError", "DataError", "DdstackError", "NumericalError",
    "NuisanceEstimates", "PointEstimate", "RepetitionSet",
    "aggregate_repetitions", "atet_estimate", "plm_estimate",
    "BUILTIN_LEARNERS", "FittedLearner", "LearnerSpec", "fit", "make_spec",
    "oracle_learner", "predict",
    "EstimatorSettings", "RunResult", "ddml_atet", "ddml_plm",
    "DgpSpec", "EstimatorConfig", "SimulationReport", "calibrate_generative",
    "calibrate_toy_scale", "generate", "run_monte_carlo", "toy_spec",
    "StackingWeights", "cls_solve", "final_learn", "project_to_simplex",
    "stack", "stack_conventional", "stack_pooled", "stack_short",
]
