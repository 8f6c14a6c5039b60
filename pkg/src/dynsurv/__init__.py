"""Dynamic individualized survival prediction from longitudinal biomarkers.

Core pieces: a joint longitudinal/survival model and landmark Cox models for
pi(u | t) = Pr(T* >= u | T* > t, marker history to t), dynamic
discrimination/calibration metrics, and a simulation benchmark comparing the
two approaches against gold-standard probabilities.
"""

from .data import (
    Dataset,
    LongitudinalObservation,
    SubjectRecord,
    assemble_dataset,
    load_dataset,
    load_longitudinal_csv,
    load_survival_csv,
    risk_set,
    save_longitudinal_csv,
    save_survival_csv,
)
from .dynpred import DynamicPrediction, NewSubject, predict_jm, sample_theta
from .errors import (
    DataError,
    DynsurvError,
    NumericalError,
    SpecificationError,
    UndefinedMetricError,
)
from .jointmodel import (
    JointFit,
    JointModelConfig,
    JointTheta,
    cum_hazard,
    fit_joint,
    hazard,
    joint_loglik,
    linear_predictor,
    survival,
)
from .landmark import (
    CoxFit,
    LandmarkForm,
    WeibullPHFit,
    breslow_cumhaz,
    fit_cox,
    fit_weibull_ph,
    landmark_features,
    predict_lm,
    predict_lm_weibull,
)
from .lmm import LmmFit, LmmSpec, eb_mode, fit_lmm, trajectory
from .metrics import (
    JointModelPredictor,
    LandmarkPredictor,
    StepSurvival,
    auc_hat,
    c_dyn_hat,
    comparable_pairs,
    evaluate_models,
    ipe_hat,
    kaplan_meier,
    pe_hat,
    r2_measures,
    weight_E,
)
from .simbench import (
    SCENARIOS,
    Scenario,
    calibrate_censoring,
    gold_standard,
    run_benchmark,
    simulate_dataset,
    summarize_benchmark,
)

__version__ = "0.1.0"
