"""Exception hierarchy shared by all ionflux modules.

Every failure mode raised by the library derives from :class:`IonfluxError`
so callers (and the CLI) can map domain errors to a single exit path.
"""

from __future__ import annotations


class IonfluxError(Exception):
    """Base class for all ionflux domain errors."""


class InvalidInputError(IonfluxError):
    """Malformed or empty input where data was required."""


class DegenerateProjectionError(IonfluxError):
    """Electroneutrality projection requested with an all-zero masked valence vector."""


class InvalidFeedError(IonfluxError):
    """Feed composition violates neutrality beyond repair, or has negative entries."""


class IncompleteModelError(IonfluxError):
    """Activity model is missing interaction parameters for a present ion pair."""


class IonExceedsPoreError(IonfluxError):
    """Ion radius at or above the pore radius; hindrance factors undefined."""


class InvalidFlowError(IonfluxError):
    """Non-positive Reynolds or Schmidt number in the mass-transfer correlation."""


class InfeasiblePartitioningError(IonfluxError):
    """Donnan closure residual has no sign change on the bracketing interval."""


class FilmDivergenceError(IonfluxError):
    """Film-layer iteration diverged; carries the residual trace."""

    def __init__(self, message: str, trace: list[float] | None = None):
        super().__init__(message)
        self.trace = trace or []


class NonConvergenceError(IonfluxError):
    """Pore fixed-point iteration exhausted max_iters; carries the residual history."""

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history or []


class NumericalBreakdownError(IonfluxError):
    """Negative concentration or non-finite value appeared mid-iteration."""


class CalibrationFailureError(IonfluxError):
    """Evaluation budget exhausted without a single successful solver evaluation."""


class IntegrationFailureError(IonfluxError):
    """ODE integration exceeded max steps or the step size underflowed."""

    def __init__(self, message: str, last_t: float | None = None, last_state=None):
        super().__init__(message)
        self.last_t = last_t
        self.last_state = last_state


class NumericalOverflowError(IonfluxError):
    """Non-finite activations inside the network vector field."""


class UnsupportedSpeciesError(IonfluxError):
    """Feed contains a species the model checkpoint was not built for."""


class UnsupportedDimensionError(IonfluxError):
    """Sobol dimension exceeds the available direction numbers."""


class TrainingAbortError(IonfluxError):
    """Non-finite gradients encountered during optimization."""


class DataQualityError(IonfluxError):
    """Too large a fraction of solver runs failed while generating a dataset."""


class InvalidStateError(IonfluxError):
    """Operation called on a state violating its preconditions."""


class DatasetParseError(IonfluxError):
    """Malformed dataset row; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DatasetValidationError(IonfluxError):
    """Dataset rows are individually well-formed but mutually inconsistent."""
