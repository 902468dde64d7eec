"""Exception hierarchy shared by every module."""


class RotRegError(Exception):
    """Base class for all errors raised by rotreg."""


class NonFinite(RotRegError, ValueError):
    """An input contains NaN or Inf."""


class InvalidRotation(RotRegError, ValueError):
    """A matrix is not a rotation (orthonormality or determinant violated)."""


class DegenerateInput(RotRegError, ValueError):
    """Input lies on the set where a mapping is undefined or non-unique."""


class NearSingularDerivative(RotRegError, ArithmeticError):
    """An analytic derivative would divide by a vanishing denominator."""


class OutOfRange(RotRegError, ValueError):
    """A rotation lies outside the image of a restricted mapping."""


class Unsupported(RotRegError, NotImplementedError):
    """Operation not defined for this mapping kind."""


class InjectiveMapping(Unsupported):
    """The mapping is injective, so no pair of distinct pre-images exists."""


class EmptyPointSet(RotRegError, ValueError):
    pass


class ZeroDiameter(RotRegError, ValueError):
    pass


class ShapeMismatch(RotRegError, ValueError):
    pass


class NonFiniteParameters(RotRegError, FloatingPointError):
    """Training produced NaN/Inf parameters."""
