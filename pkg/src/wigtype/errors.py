"""Exception hierarchy shared by all wigtype modules.

Input/contract violations derive from InputError (CLI exit code 2),
numerical failures from NumericalError (CLI exit code 3).
"""


class WigtypeError(Exception):
    pass


class InputError(WigtypeError):
    """The caller handed us something the contracts reject."""


class NumericalError(WigtypeError):
    """An iteration or quadrature failed to reach its target."""


class DegenerateInput(InputError):
    """Matrix dimension too small (n <= 1) or malformed profile data."""


class AssumptionViolated(InputError):
    """Profile fails the admissibility checks (positivity, one-cut, ...)."""


class MultiCut(AssumptionViolated):
    """Density of states has more than one support interval."""


class CuspSuspect(AssumptionViolated):
    """Interior near-zero of the density: cusp or closing gap suspected."""


class DataContractViolation(InputError):
    """A constructed test function violates one of its envelope inequalities."""


class OutOfGrid(InputError):
    """Requested evaluation point lies outside the solved grid."""


class InsufficientGrid(InputError):
    """Energy grid does not bracket the spectral support."""


class StencilOutOfRange(InputError):
    """Finite-difference stencil leaves the admissible parameter range."""


class NonConvergence(NumericalError):
    """Iteration budget exhausted with residual above tolerance."""

    def __init__(self, message, residual=None, where=None):
        super().__init__(message)
        self.residual = residual
        self.where = where


class HalfPlaneViolation(NumericalError):
    """Solver iterate left the upper half-plane and damping retries failed."""


class PowerIterationStall(NumericalError):
    """Power iteration stopped making progress before reaching tolerance."""


class NearSingular(NumericalError):
    """Stability-operator denominator below the configured floor."""


class QuadratureNonConvergence(NumericalError):
    """Refined quadrature did not agree with the coarse pass."""


class WindowTooNarrow(NumericalError):
    """Edge-fit window contains too few usable sample points."""


class ParticleCollision(NumericalError):
    """SDE time step failed to keep the particles ordered."""


class EigenFailure(NumericalError):
    """Dense eigensolver did not converge."""
