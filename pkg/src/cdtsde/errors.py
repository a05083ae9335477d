"""Exception types shared across the package."""


class CDTError(Exception):
    """Base class for all package errors."""


class ParameterError(CDTError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ScheduleError(CDTError, ValueError):
    """Inconsistent schedule or infeasible time grid."""


class DimensionError(CDTError, ValueError):
    pass


class SingularityError(CDTError, ZeroDivisionError):
    """Raised where the mixing field reaches 1 or the noise level reaches 0."""


class ConstraintError(CDTError, ValueError):
    """A schedule path violates its endpoint, range or monotonicity constraints."""


class TrainingError(CDTError, RuntimeError):
    pass


class FormatError(CDTError, ValueError):
    """Malformed tensor, parameter or config file."""


class ConfigError(CDTError, ValueError):
    pass
