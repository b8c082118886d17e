"""Exception types shared across the package."""


class WagepathError(Exception):
    """Base class for all package errors."""


class ConfigError(WagepathError):
    """Invalid or inconsistent model configuration."""


class SingularSigma(ConfigError):
    """Volatility matrix is numerically singular; market price of risk undefined."""


class HypothesisViolated(WagepathError):
    """The finiteness condition fails (nu <= 0); value functions are undefined."""


class NoConvergence(WagepathError):
    """Fixed-point iteration exhausted its budget.

    Carries the number of iterations performed and the last sup-norm defect so
    callers can retry on a refined grid or with a larger budget.
    """

    def __init__(self, iterations, defect, message=None):
        self.iterations = iterations
        self.defect = defect
        super().__init__(
            message
            or f"no convergence after {iterations} iterations (last defect {defect:.3e})"
        )


class OutOfRange(WagepathError):
    """Argument outside its admissible interval."""


class GridMismatch(WagepathError):
    """Two discretizations that must be aligned are not."""


class BoundaryViolation(WagepathError):
    """A function violates its required boundary value."""


class InadmissibleState(WagepathError):
    """State lies outside the admissible region (total wealth < 0)."""


class ConfigMismatch(WagepathError):
    """Two inputs built from configurations that must agree do not."""


class AdmissibilityBreach(WagepathError):
    """Simulated total wealth dipped below the discretization allowance."""

    def __init__(self, worst, tolerance, message=None):
        self.worst = worst
        self.tolerance = tolerance
        super().__init__(
            message
            or f"total wealth fell to {worst:.6g}, below -{tolerance:.6g}"
        )
