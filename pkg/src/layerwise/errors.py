"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce.
"""


class LayerwiseError(Exception):
    exit_code = 2


class PlanningError(LayerwiseError, ValueError):
    """A ModelSpec field violates its invariants."""


class ConfigError(LayerwiseError, ValueError):
    pass


class ShapeError(LayerwiseError, ValueError):
    pass


class ContextError(LayerwiseError):
    """Sequence or cache would exceed the context length."""


class DataError(LayerwiseError, ValueError):
    pass


class SourceExhaustedError(DataError):
    pass


class FormatError(LayerwiseError):
    """Checkpoint file is corrupt, truncated or inconsistent with its spec."""


class ScheduleError(LayerwiseError, ValueError):
    pass


class ProtocolError(LayerwiseError):
    pass


class NumericError(LayerwiseError, ArithmeticError):
    exit_code = 3


class CorrectnessError(NumericError):
    """Two code paths that must agree numerically did not."""
