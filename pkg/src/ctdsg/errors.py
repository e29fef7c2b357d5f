"""Exception types raised across the package."""

from __future__ import annotations


class CtdsgError(Exception):
    """Base class for all package errors."""


class InvalidInterval(CtdsgError, ValueError):
    pass


class NonPeriodicHorizonTooShort(CtdsgError, ValueError):
    pass


class DecayNotObserved(CtdsgError, RuntimeError):
    pass


class DimensionMismatch(CtdsgError, ValueError):
    pass


class SingularSystem(CtdsgError, RuntimeError):
    """Summed Hessian is singular; carries the least-norm solution."""

    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution


class UnboundedRegion(CtdsgError, ValueError):
    pass


class NonFiniteState(CtdsgError, FloatingPointError):
    """A simulated path left the finite range.

    Attributes give the step index, the offending agent and the magnitude seen.
    """

    def __init__(self, step: int, agent: int, magnitude: float, path: int | None = None):
        where = f"path {path}, " if path is not None else ""
        super().__init__(
            f"state diverged at {where}step {step}, agent {agent} (|x| = {magnitude:.3g})"
        )
        self.step = step
        self.agent = agent
        self.magnitude = magnitude
        self.path = path


class PathDiverged(NonFiniteState):
    pass


class DivergenceCeilingExceeded(CtdsgError, RuntimeError):
    def __init__(self, diverged: list[int], runs: int):
        super().__init__(
            f"{len(diverged)} of {runs} paths diverged (ceiling is 1%): {diverged[:10]}"
        )
        self.diverged = diverged
        self.runs = runs


class QuadratureFailure(CtdsgError, ArithmeticError):
    pass


class MissingCertificate(CtdsgError, ValueError):
    pass


class NonPositiveGap(CtdsgError, ValueError):
    pass


class OutOfRange(CtdsgError, ValueError):
    pass


class ConfigError(CtdsgError, ValueError):
    """Invalid experiment configuration; ``field`` is the dotted path at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
