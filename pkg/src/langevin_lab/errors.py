"""Exception hierarchy shared by all modules."""


class LabError(Exception):
    """Base class for every error raised by the package."""


class DegenerateMassError(LabError):
    pass


class ModelError(LabError):
    pass


class GridError(LabError):
    pass


class PositivityError(LabError):
    """A density that must be positive fell below its floor."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class ResolutionError(LabError):
    pass


class IntegrabilityError(LabError):
    pass


class TemperatureTooLowError(LabError):
    pass


class TruncationError(LabError):
    pass


class NonUniqueMinimumError(LabError):
    pass


class DegenerateHessianError(LabError):
    pass


class DiscretizationDefectError(LabError):
    pass


class StabilityError(LabError):
    """Time stepping blew up; ``last_good`` holds the last accepted state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class QuadratureDefectError(LabError):
    pass


class WindowTooWideError(LabError):
    def __init__(self, message, suggested_window=None):
        super().__init__(message)
        self.suggested_window = suggested_window


class NumericalError(LabError):
    pass


class ConfigError(LabError):
    """Schema violation in an experiment configuration."""
