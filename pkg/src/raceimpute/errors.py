"""Exception and warning types shared across the package."""

from __future__ import annotations


class RaceImputeError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(RaceImputeError):
    """A file could not be parsed; carries path and 1-based row number when known."""

    def __init__(self, message: str, path: str | None = None, row: int | None = None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{row}" if row is not None else "") + "]"
        super().__init__(message + where)


class InvariantError(RaceImputeError):
    """A domain invariant was violated."""


class UnknownSourceCode(RaceImputeError):
    """A source race code is absent from the mapping configuration."""


class DuplicateGeoid(RaceImputeError):
    """The same tract GEOID appeared twice in one table."""


class InvalidMarginal(RaceImputeError):
    """A marginal distribution has a non-positive component."""


class MissingFirstNamePrior(RaceImputeError):
    """A first-name prior is required but absent."""


class EmptyLastName(RaceImputeError):
    """Tokenization requires a non-empty last name."""


class ShapeMismatch(RaceImputeError):
    """Tensor shapes are inconsistent with the model configuration."""


class NonFiniteLoss(RaceImputeError):
    """Training produced a NaN/inf loss (exploding activations)."""


class InvalidEpsilon(RaceImputeError):
    """Finite-difference step must be strictly positive."""


class DegenerateLabels(RaceImputeError):
    """Supervised fitting needs at least two distinct labels."""


class LengthMismatch(RaceImputeError):
    """Paired sequences have different lengths."""


class EmptyInput(RaceImputeError):
    """An operation that needs at least one element received none."""


class UnsortedBinEdges(RaceImputeError):
    """Income bin edges must be strictly increasing."""


class OutOfSupport(RaceImputeError):
    """An input lies outside the synthetic generator's support."""


class ModelFormatError(RaceImputeError):
    """A serialized model file is malformed, unversioned, or corrupt."""


class GeocodeError(RaceImputeError):
    """Base class for geocoding failures."""


class NetworkError(GeocodeError):
    """Transport-level failure talking to the geocoding service."""


class ApiFormatError(GeocodeError):
    """The geocoding service returned an unparseable body."""


class RateLimited(GeocodeError):
    """The geocoding service asked us to back off."""


class RaceImputeWarning(UserWarning):
    """Base class for package warnings."""


class DegeneratePosteriorWarning(RaceImputeWarning):
    """An all-zero unnormalized posterior forced a fallback."""


class EmptyClassWarning(RaceImputeWarning):
    """A race class has too few rows to stratify meaningfully."""
