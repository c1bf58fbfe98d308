"""Exception hierarchy.

Input and configuration problems derive from :class:`InputError` and numerical or
degenerate-inference problems from :class:`NumericalError`; the CLI maps them
to exit codes 2 and 3.
"""

from __future__ import annotations


class PanelSelinfError(Exception):
    """Base class for all package errors."""


class InputError(PanelSelinfError, ValueError):
    pass


class NumericalError(PanelSelinfError, ArithmeticError):
    pass


class ParseError(InputError):
    pass


class UnbalancedPanel(InputError):
    pass


class DegenerateRegressor(InputError):
    pass


class KTooLarge(InputError):
    pass


class InvalidPair(InputError):
    pass


class InvalidSpec(InputError):
    pass


class RankDeficientInstruments(NumericalError):
    pass


class SingularGram(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class DegenerateDirection(NumericalError):
    pass


class ObservedStatExcluded(NumericalError):
    def __init__(self, message: str, triple: tuple | None = None):
        super().__init__(message)
        self.triple = triple


class StatOutsideSupport(NumericalError):
    pass


class ZeroMassSupport(NumericalError):
    pass


class QuadratureFailure(NumericalError):
    pass
