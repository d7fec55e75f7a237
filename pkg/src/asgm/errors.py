"""Exception hierarchy shared by all modules."""


class AsgmError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AsgmError, ValueError):
    """Grid too small or array shapes inconsistent."""


class FormatError(AsgmError, ValueError):
    """Malformed image or snapshot file."""


class MalformedHeaderError(FormatError):
    pass


class UnsupportedDepthError(FormatError):
    pass


class MagicMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class TimeRangeError(AsgmError, ValueError):
    """Time outside [0, T]."""


class UnsupportedFeatureError(AsgmError, NotImplementedError):
    pass


class UnknownPresetError(AsgmError, KeyError):
    pass


class DivergenceError(AsgmError, FloatingPointError):
    """State left the finite range during time stepping."""

    def __init__(self, t, max_abs, context: str = ""):
        self.t = t
        self.max_abs = max_abs
        self.context = context
        where = f"{context}: " if context else ""
        super().__init__(f"{where}integration diverged at t={t:.6g} (max |x| = {max_abs:.6g})")


class InstanceError(AsgmError, ValueError):
    """Operation not defined for this kind of SDE instance."""


class DegenerateVarianceError(AsgmError, ZeroDivisionError):
    pass


class TrainingDivergedError(AsgmError, FloatingPointError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training loss became {loss} at iteration {iteration}")


class ConfigError(AsgmError, ValueError):
    pass


class DatasetError(AsgmError, ValueError):
    pass
