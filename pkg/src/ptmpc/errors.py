"""Exception types shared across the package."""

from __future__ import annotations


class PtmpcError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PtmpcError):
    """A vector or matrix has the wrong shape for the operation."""


class InputSetError(PtmpcError):
    """A control input lies outside the plant's admissible input box."""


class DomainError(PtmpcError):
    """A sampling domain is empty or degenerate."""


class ParameterError(PtmpcError):
    """A parameter record fails validation."""


class ScenarioError(PtmpcError):
    """A scenario file fails to parse or validate.

    Carries the offending key path when known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message if key is None else f"{key}: {message}")


class TerminalSetError(PtmpcError):
    """The configured terminal set fails its invariance certificate."""


class InfeasibleAtStep(PtmpcError):
    """The surrogate program has no verified solution and no usable fallback.

    Attributes:
        time: controller step at which the failure occurred.
        constraint: short tag of the violated constraint family
            ("eroded_set", "terminal_set", "input_set").
        index: prediction index k of the first violation, if applicable.
        margin: signed constraint margin at the violation (negative = violated).
    """

    def __init__(self, time: int, constraint: str, index: int | None = None,
                 margin: float | None = None, detail: str = ""):
        self.time = time
        self.constraint = constraint
        self.index = index
        self.margin = margin
        msg = f"infeasible at t={time}: {constraint}"
        if index is not None:
            msg += f" (k={index})"
        if margin is not None:
            msg += f", margin={margin:.6g}"
        if detail:
            msg += f"; {detail}"
        super().__init__(msg)
