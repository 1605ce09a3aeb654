"""Exception types shared across the package."""


class HmmFieldsError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(HmmFieldsError):
    pass


class NotPositiveDefinite(HmmFieldsError):
    """Non-positive pivot during Cholesky factorization.

    Raised as a recoverable signal: the inner Newton optimizer catches it
    and retries with diagonal damping.
    """


class AllZeroRow(HmmFieldsError):
    """A transition-matrix row has no admissible (non structural-zero) entry."""


class ZeroLikelihoodStep(HmmFieldsError):
    """A forward-recursion normalizer underflowed to zero."""

    def __init__(self, t):
        self.t = t
        super().__init__(f"forward normalizer underflowed to 0 at time index {t}")


class NonErgodicCycle(HmmFieldsError):
    """The periodic transition-matrix product has no unique stationary vector."""


class DegenerateMesh(HmmFieldsError):
    pass


class DegenerateGrid(HmmFieldsError):
    """No grid cells fall inside the evaluation hull."""


class MaxIterationsExceeded(HmmFieldsError):
    pass


class NonFiniteObjective(HmmFieldsError):
    pass


class NonFiniteDerivative(HmmFieldsError):
    pass


class ConfigError(HmmFieldsError):
    """Invalid or inconsistent model/run configuration."""
