"""Exception types raised across the package."""


class PConvLabError(Exception):
    """Base class for all errors raised by pconvlab."""


class DimensionError(PConvLabError, ValueError):
    pass


class ShapeError(PConvLabError, ValueError):
    pass


class BoundsError(PConvLabError, IndexError):
    pass


class GeometryError(PConvLabError, ValueError):
    pass


class SpecError(PConvLabError, ValueError):
    pass


class ParameterError(PConvLabError, ValueError):
    pass


class ConfigError(PConvLabError, ValueError):
    pass


class MeasurementError(PConvLabError, ValueError):
    pass


class TrainingError(PConvLabError, RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
