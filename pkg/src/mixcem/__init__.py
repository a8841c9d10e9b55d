"""Finite mixtures estimated by EM and by classification EM."""

__version__ = "0.1.0"

from .classify import Assignment, ClassifierSpec, FeatureSource, Rule, classify_hard, misclassification_rate
from .densities import (
    ExponentialParams,
    Family,
    MixtureModel,
    MvNormalParams,
    NormalParams,
    PanelLinearParams,
    PoissonParams,
    log_density,
    sample,
    weighted_mle,
)
from .mixture_em import EmConfig, FitReport, fit_em, mixture_loglik
from .cem import CemConfig, fit_cem, multi_start_cem
from .panel import PanelConfig, PanelDataset, PanelStart, fit_panel, generate_exercise2, mundlak_expand
from .simulate import Scenario, SimConfig, SimulationReport, run_exercise1, run_exercise2
from .crossval import CvPlan, CvReport, cross_validate
