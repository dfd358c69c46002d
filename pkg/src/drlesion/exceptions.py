"""Exception hierarchy shared by every stage of the pipeline."""


class DRLesionError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DRLesionError, ValueError):
    """An input violated the documented contract of an operation."""


class InvalidColorSpaceError(ContractError):
    pass


class PairingError(ContractError):
    """Image and mask do not belong together (e.g. different sizes)."""


class ConfigError(DRLesionError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ConfigMismatchError(ConfigError):
    """A checkpoint was produced under settings different from the request."""


class TrainingError(DRLesionError, RuntimeError):
    pass


class UndefinedMetricError(ContractError):
    pass


class NoForegroundWarning(UserWarning):
    """Cropping found no pixel above the background threshold."""
