"""Survey-response debiasing for multi-head ranking models.

Modules:

``nn_core``       dense layers, manual backprop, optimisers, serialization
``survey_model``  multi-head survey model with LHUC and SE modules
``submit_model``  submit-propensity model and inverse-propensity estimators
``simulator``     synthetic feed with known ground truth
``metrics``       AUC, per-user AUC, calibration and stratified reports
``ranking``       score fusion, top-k selection and offline A/B replay
``harness``       experiment stages and reports; ``cli`` wraps them
"""

from .harness import ExperimentConfig, run_experiment
from .simulator import SimConfig
from .submit_model import SubmitModel
from .survey_model import SurveyModel

__all__ = ["ExperimentConfig", "SimConfig", "SubmitModel", "SurveyModel", "run_experiment"]
__version__ = "0.1.0"
