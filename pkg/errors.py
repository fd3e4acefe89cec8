"""
Error Types Module

One exception per failure mode the toolkit distinguishes. Everything derives
from ToolkitError so callers (and the check suite) can catch the family.
"""

from typing import List, Optional, Tuple


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class DegenerateGradient(ToolkitError):
    """|grad xi| fell below tolerance where a normal was requested."""


class OutsideCollar(ToolkitError):
    """Point is too deep for the nearest-point uniqueness collar."""

    def __init__(self, message: str, candidate=None, distance: Optional[float] = None):
        super().__init__(message)
        self.candidate = candidate
        self.distance = distance


class ChartRadiusTooSmall(ToolkitError):
    """Curvature forces the boundary chart radius below the floor."""


class ExitedDomain(ToolkitError):
    """Characteristic left the domain before reaching the target time."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


class NoExitWithinHorizon(ToolkitError):
    """Trajectory stayed inside the domain for the whole search horizon."""


class GrazingAmbiguous(ToolkitError):
    """xi touched zero without a clean sign change, or the state sits on gamma_0."""


class GrazingSingularity(ToolkitError):
    """A formula with a 1/(n.v) factor was requested at a grazing point."""


class NegativeRadicand(ToolkitError):
    """beta^2 is genuinely negative: sign condition or convexity is violated."""


class QuadratureUnderresolved(ToolkitError):
    """Successive quadrature refinements disagree beyond tolerance."""


class AdmissibilityViolation(ToolkitError):
    """A kernel exponent lies outside its admissible window."""


class ExitDetectionFailed(ToolkitError):
    """Root refinement of an exit bracket did not converge."""


class CycleBudgetExceeded(ToolkitError):
    """Estimated truncation error of the diffuse-cycle expansion is too large."""


class CompatibilityViolation(ToolkitError):
    """Neumann solvability or initial/boundary compatibility failed."""


class SolverDiverged(ToolkitError):
    """An iterative linear solve did not converge."""


class SchemaError(ToolkitError):
    """Run configuration failed validation.

    Attributes:
        issues: list of (dotted key, line number or None, message)
    """

    def __init__(self, issues: List[Tuple[str, Optional[int], str]]):
        self.issues = list(issues)
        lines = []
        for key, line, msg in self.issues:
            where = f"{key} (line {line})" if line is not None else key
            lines.append(f"{where}: {msg}")
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))
