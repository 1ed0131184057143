"""Exception types shared across modules."""


class ShapeError(ValueError):
    """Array shapes violate an operation's contract."""


class NormalizationError(ValueError):
    """A vector that must be normalized has zero norm."""


class StateError(ValueError):
    """Iteration state is invalid (e.g. a non-finite step size)."""


class LabelError(ValueError):
    """Label ids outside ``[0, n_classes)``."""


class ConfigurationError(ValueError):
    pass
