"""Exception types shared across the package."""


class DPAuditError(Exception):
    """Base class for all dpaudit errors."""


class ConfigError(DPAuditError, ValueError):
    """Invalid configuration, shapes or arguments."""


class NumericError(DPAuditError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CalibrationError(DPAuditError):
    """Noise calibration could not reach the requested budget."""
