"""Exception types carrying a stable machine-readable ``code``."""


class SysIdError(Exception):
    """Base class. ``code`` is one of the upper-case identifiers below."""

    code = "SYSID_ERROR"
    exit_code = 3

    def __init__(self, message="", code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        msg = super().__str__()
        return f"[{self.code}] {msg}" if msg else f"[{self.code}]"


class ValidationError(SysIdError, ValueError):
    """Malformed input: dimensions, missing channels, bad schema."""

    code = "VALIDATION"
    exit_code = 2


class NumericError(SysIdError, ArithmeticError):
    """The computation itself failed (conditioning, stability, convergence)."""

    code = "NUMERIC"
    exit_code = 3


class SingularSigmaWarning(RuntimeWarning):
    """Sample noise covariance is (numerically) singular."""


class SingularJacobianWarning(RuntimeWarning):
    """Parameter-map Jacobian lost column rank at the solution."""


def improper_filter(msg):
    return ValidationError(msg, "IMPROPER_FILTER")


def dim_mismatch(msg):
    return ValidationError(msg, "DIM_MISMATCH")
