"""Exception hierarchy.

Every failure the estimators can report has its own class so callers (and the
CLI) can distinguish bad input from estimation breakdowns.
"""


class CausalPanelError(Exception):
    """Base class for all package errors."""


# -- panel structure ---------------------------------------------------------


class PanelValidationError(CausalPanelError):
    pass


class DuplicateKey(PanelValidationError):
    pass


class NonAbsorbing(PanelValidationError):
    pass


class NonBinaryOutcome(PanelValidationError):
    pass


class TreatedInInitialPeriod(PanelValidationError):
    pass


class UnknownUnit(CausalPanelError, KeyError):
    pass


# -- reconstruction / policy coding ------------------------------------------


class ReconstructionError(CausalPanelError):
    pass


class UnknownStatus(ReconstructionError):
    pass


class InconsistentAges(ReconstructionError):
    pass


class MissingPolicyYear(ReconstructionError):
    pass


class PolicyError(CausalPanelError):
    pass


class DateParseError(PolicyError):
    pass


class DuplicateEvent(PolicyError):
    pass


# -- estimation --------------------------------------------------------------


class EstimationError(CausalPanelError):
    pass


class NoTreatedUnits(EstimationError):
    pass


class EmptyComparisonSet(EstimationError):
    pass


class EmptyTreatedSet(EstimationError):
    pass


class PropensityOverflow(EstimationError):
    """Some comparison unit has a fitted propensity at or above the trim bound."""


class SingularDesign(EstimationError):
    pass


class ConvergenceError(EstimationError):
    pass


class InsufficientPretreatment(EstimationError):
    pass


class RankDeficient(EstimationError):
    pass


class MissingFactorYear(EstimationError):
    pass


class NonConvergenceWarning(UserWarning):
    """Factor model hit its iteration cap; the returned model has ``converged=False``."""


# -- aggregation -------------------------------------------------------------


class AggregationError(CausalPanelError):
    pass


class MissingCell(AggregationError):
    pass


class WeightDegenerate(AggregationError):
    pass


class WindowOutOfRange(AggregationError):
    pass


# -- inference ---------------------------------------------------------------


class InferenceError(CausalPanelError):
    pass


class SingleCluster(InferenceError):
    pass


class TooManyFailedReplicates(InferenceError):
    pass


class EmptyStratum(InferenceError):
    pass


# -- simulation --------------------------------------------------------------


class InfeasibleSpec(CausalPanelError):
    pass
