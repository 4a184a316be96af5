"""Staggered-adoption policy evaluation on reconstructed retrospective panels."""

from ._kernels import BACKEND
from .core import (
    NEVER,
    CohortIndex,
    CohortPanel,
    PanelObservation,
    build_cohort_index,
    event_time,
    read_panel_csv,
    validate_panel,
    write_panel_csv,
)
from .did import BasePeriod, ControlGroup, DidConfig, GroupTimeEffect, estimate_all, estimate_group_time
from .eventstudy import DEFAULT_WINDOWS, EventStudyResult, aggregate_event_study, window_average
from .ifect import FactorModel, IfectConfig, estimate_ifect, fit_factor_model, impute_and_average, select_rank
from .inference import BootstrapSpec, ClusterScheme, cluster_bootstrap, influence_se
from .policy import DateRule, PolicyEvent, PolicyKind, adoption_curve, code_annual_indicators
from .reconstruct import (
    ReconstructionConfig,
    SmokerStatus,
    SurveyRecord,
    composition_report,
    reconstruct_history,
    reconstruct_panel,
)
from .simulate import DgpSpec, GroundTruth, OutcomeKind, benchmark, generate

__version__ = "0.1.0"
