"""Exception hierarchy shared by the simulation and analysis modules."""


class GridlockError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(GridlockError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class CapacityError(DomainError):
    """Requested vehicle density does not fit on the road bumper to bumper."""


class StabilityError(GridlockError, ArithmeticError):
    """Time integration produced overlapping vehicles (dt too large)."""


class LoadError(GridlockError):
    """An input file is malformed or references unknown records."""
