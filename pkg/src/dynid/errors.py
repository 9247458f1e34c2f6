"""Exception types shared across the toolkit.

Every error raised on a documented failure path derives from DynidError so
callers (and the CLI) can distinguish toolkit failures from programming bugs.
"""


class DynidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DynidError):
    """A configuration file or config object is invalid; message names the field."""


class RangeError(DynidError):
    """A variation-range table is malformed (min > max, negative bounds, ...)."""


class DomainError(DynidError):
    """Numeric input outside the physical domain (non-positive mass, length, ...)."""


class UrdfParseError(DynidError):
    """Malformed XML. Carries the (line, column) reported by the parser when known."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (line {position[0]}, column {position[1]})"
        super().__init__(message)
        self.position = position


class UrdfUnsupportedError(DynidError):
    """Well-formed XML using a feature outside the supported URDF subset."""


class InvalidModelError(DynidError):
    """A robot model violates its structural invariants."""


class IllConditionedModelError(DynidError):
    """The joint-space inertia matrix could not be factorized as SPD."""


class InfeasibleWorkspaceError(DynidError):
    """Waypoint sampling exhausted its retry budget without a feasible candidate."""


class OutOfRangeError(DynidError):
    """A target value lies outside its declared normalization range."""


class DegenerateDatasetError(DynidError):
    """Dataset construction produced no usable samples or features."""


class ContractError(DynidError):
    """An array argument does not match the declared shape/dtype contract."""


class TrainingDivergedError(DynidError):
    """Training loss became non-finite. Carries the epoch index."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
