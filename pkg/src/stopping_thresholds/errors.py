class StoppingError(Exception):
    """Base class for every failure raised by the solver, oracles and samplers."""

    code = "error"


class ExtrapolationError(StoppingError, ValueError):
    code = "extrapolation-error"


class InfeasibleProblemError(StoppingError, ValueError):
    code = "infeasible-problem"


class MethodInapplicableError(StoppingError, ValueError):
    code = "method-inapplicable"


class InapplicableError(StoppingError, ValueError):
    code = "inapplicable"


class LadderEpochNotIntegrableError(StoppingError, ValueError):
    code = "ladder-epoch-not-integrable"


class EstimationFailedError(StoppingError, RuntimeError):
    code = "estimation-failed"


class IllConditionedRatioError(StoppingError, RuntimeError):
    code = "ill-conditioned-ratio"


class BracketNotFoundError(StoppingError, ValueError):
    code = "bracket-not-found"


class RootInconclusiveError(StoppingError, RuntimeError):
    code = "root-inconclusive"

    def __init__(self, message: str, bracket: tuple[float, float]):
        super().__init__(message)
        self.bracket = bracket


class AssumptionViolatedError(StoppingError, ValueError):
    code = "assumption-violated"


class DPFailedError(StoppingError, RuntimeError):
    code = "dp-failed"


class OracleFailedError(StoppingError, RuntimeError):
    code = "oracle-failed"
