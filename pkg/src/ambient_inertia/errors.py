"""Exception hierarchy shared by all stages.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented return codes without inspecting messages.
"""


class InertiaError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 4


class InputError(InertiaError):
    """Bad user input: missing files, malformed documents, bad settings."""

    exit_code = 2


class CaseParseError(InputError):
    """A case file does not follow the schema."""


class CaseValidationError(InputError):
    """A parsed case violates a structural invariant."""


class ConfigurationError(InputError):
    """Inconsistent settings, e.g. a generator bus that is not measured."""


class ParameterError(InputError):
    """A numeric argument lies outside its admissible range."""


class NumericalError(InertiaError):
    """A numerical procedure could not produce a trustworthy answer."""


class NumericalRankError(NumericalError):
    """A matrix that must have full rank is numerically rank deficient."""

    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class SecularRootError(NumericalError):
    """No sign change of the secular function inside the search bracket."""


class ModelError(NumericalError):
    """The network model cannot be solved (e.g. an islanded bus)."""


class SimulationDivergedError(NumericalError):
    """A rotor speed left the admissible band during integration."""


class DetectionError(NumericalError):
    """No run of stable window estimates qualifies as a constant interval."""

    #: rolling-window estimates by generator, when the pipeline got that far
    windows = None


class AggregationError(InertiaError):
    """Per-generator results are missing for a system-level quantity."""

    exit_code = 4


class MetricError(InertiaError):
    """A metric is undefined for the supplied arguments."""
