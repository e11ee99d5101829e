"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CollapseError(Exception):
    """Base class for all errors raised by mlcollapse."""


class ConfigError(CollapseError, ValueError):
    """Invalid configuration, scenario parameters or count table."""


class UnknownMultiplicityError(CollapseError, KeyError):
    """A multiplicity was requested that the count table does not contain."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class DegenerateDistributionError(CollapseError, ValueError):
    """Some class never appears within a multiplicity group (N_m^k = 0)."""


class SpectralDegeneracyError(CollapseError, ValueError):
    """kappa_m is zero to tolerance, so the centered non-degeneracy assumption fails."""


class MatrixError(CollapseError, ValueError):
    """A matrix argument has the wrong shape or is not symmetric."""


class NumericError(CollapseError, FloatingPointError):
    """A non-finite value appeared in a loss, logit or objective evaluation."""
