"""
Exception hierarchy shared by the simulation modules and the CLI.

PreconditionError and its subclasses map to CLI exit status 2,
NumericalAbortError to exit status 3.
"""

from typing import List, Optional


class LensToolkitError(Exception):
    """Base class for every error raised by the toolkit"""


class PreconditionError(LensToolkitError, ValueError):
    """An operation was called with inputs outside its contract"""


class GlancingError(PreconditionError):
    """Boundary direction too close to tangential"""


class OutsideDomainError(PreconditionError):
    """A point that must lie in the closed domain does not"""


class CFLViolation(PreconditionError):
    """Time step exceeds the stability bound 0.5 * dx / max c"""

    def __init__(self, dt: float, bound: float):
        self.dt = dt
        self.bound = bound
        super().__init__(
            f"dt={dt:.6g} violates the CFL bound dt <= 0.5*dx/max c = {bound:.6g}"
        )


class ResolutionError(PreconditionError):
    """Sampling grid does not resolve the semiclassical wavelength"""


class SupportLeakError(PreconditionError):
    """Probe support leaves (0, eps) x Gamma_1"""


class DegenerateGradientError(PreconditionError):
    """Foliation function has (numerically) vanishing gradient"""


class NotTangentError(PreconditionError):
    """Direction is not a g-unit tangent to the level set"""


class CollarMismatchError(PreconditionError):
    """Two speeds that must agree near the boundary do not"""


class ObservationWindowError(PreconditionError):
    """No observation time separates first exit from second reflection"""


class NumericalAbortError(LensToolkitError, ArithmeticError):
    """Non-finite values appeared during integration"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class NoArrivalError(LensToolkitError):
    """No wavefront detected inside the observation window"""


class ConfigError(PreconditionError):
    """Configuration failed schema validation"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invalid configuration")
