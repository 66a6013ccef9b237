"""Error types shared across the laboratory.

Every failure mode carries a short machine-readable slug so that callers
(and the command line driver) can map failures to exit codes without
string-matching prose messages.
"""

from __future__ import annotations


class StellabError(Exception):
    """Base class; ``slug`` identifies the failure mode."""

    slug = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.slug)


# -- equilibrium construction -------------------------------------------------

class UnsupportedGammaError(StellabError):
    slug = "unsupported-gamma"


class ZeroNotFoundError(StellabError):
    slug = "zero-not-found"


class StiffFailureError(StellabError):
    slug = "stiff-failure"


class InfiniteSupportError(StellabError):
    slug = "infinite-support"


class MonotonicityViolationError(StellabError):
    slug = "monotonicity-violation"


# -- grids and quadratic forms -------------------------------------------------

class DegenerateGridError(StellabError):
    slug = "degenerate-grid"


class SingularQuadratureError(StellabError):
    slug = "singular-quadrature"


class NotInWeightedSpaceError(StellabError):
    slug = "not-in-weighted-space"


# -- eigenvalue problem and fixed point ----------------------------------------

class EigenFailError(StellabError):
    slug = "eigen-fail"


class GramFailError(StellabError):
    slug = "gram-fail"


class StableRegimeError(StellabError):
    slug = "stable-regime"


class NoUnstableWindowError(StellabError):
    slug = "no-unstable-window"


class FixedPointFailError(StellabError):
    slug = "fixed-point-fail"


class ModeRegularityFailError(StellabError):
    slug = "mode-regularity-fail"


class InadmissibleTrialError(StellabError):
    slug = "inadmissible-trial"


# -- linear evolution -----------------------------------------------------------

class ImplicitSolveFailError(StellabError):
    slug = "implicit-solve-fail"


class OverflowFailError(StellabError):
    slug = "overflow"


class LogDomainError(StellabError):
    slug = "log-domain-error"


class BulkViscosityRequiredError(StellabError):
    slug = "bulk-viscosity-required"


class IncompleteTrajectoryError(StellabError):
    slug = "incomplete-trajectory"


# -- nonlinear simulation --------------------------------------------------------

class AmplitudeOutOfRangeError(StellabError):
    slug = "amplitude-out-of-range"


class VacuumCollapseError(StellabError):
    slug = "vacuum-collapse"


class ViscousSolveFailError(StellabError):
    slug = "viscous-solve-fail"


class NoEscapeError(StellabError):
    slug = "no-escape"
