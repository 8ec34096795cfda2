"""Exception hierarchy shared by all geotomo modules."""


class GeotomoError(Exception):
    """Base class for all errors raised by this package."""


# --- expression language ---------------------------------------------------

class ExpressionSyntaxError(GeotomoError):
    """Malformed expression text; carries the 1-based column of the failure."""

    def __init__(self, message, column, expected=()):
        super().__init__(f"{message} (column {column})")
        self.column = column
        self.expected = tuple(expected)


class UnknownIdentifierError(GeotomoError):
    def __init__(self, name, column=None):
        loc = f" (column {column})" if column is not None else ""
        super().__init__(f"unknown identifier '{name}'{loc}")
        self.name = name
        self.column = column


class NonFiniteValueError(GeotomoError):
    """Evaluation produced inf/nan; names the offending subexpression."""

    def __init__(self, subexpression, point):
        super().__init__(f"non-finite value in '{subexpression}' at {tuple(point)}")
        self.subexpression = subexpression
        self.point = tuple(point)


# --- metric geometry --------------------------------------------------------

class NonPositiveDefiniteError(GeotomoError):
    pass


class NotOnBoundaryError(GeotomoError):
    pass


class NotTangentError(GeotomoError):
    pass


# --- geodesic flow ----------------------------------------------------------

class NoExitError(GeotomoError):
    """Trajectory exceeded the arc-length budget without reaching the stop surface."""


class StepFailureError(GeotomoError):
    pass


class NoConvergenceError(GeotomoError):
    pass


class ChartDegenerateError(GeotomoError):
    pass


# --- fields / transform -----------------------------------------------------

class GridBoundaryError(GeotomoError):
    pass


class StencilBoundaryError(GeotomoError):
    pass


class QuadratureFailureError(GeotomoError):
    pass


# --- decomposition ----------------------------------------------------------

class SingularSystemError(GeotomoError):
    pass


# --- support harness --------------------------------------------------------

class AvoidingRayNotFoundError(GeotomoError):
    pass


class DeformationStuckError(GeotomoError):
    def __init__(self, message, pinch=None):
        super().__init__(message)
        self.pinch = pinch


class OverlapMismatchError(GeotomoError):
    pass


class HypothesisViolatedError(GeotomoError):
    """The field has nonzero transform on a geodesic that avoids the obstacle."""

    def __init__(self, message, worst_value=None, worst_ray=None):
        super().__init__(message)
        self.worst_value = worst_value
        self.worst_ray = worst_ray
