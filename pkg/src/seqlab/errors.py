"""Exception types shared across the package."""


class SeqLabError(Exception):
    """Base class for all package errors."""


class ParseError(SeqLabError):
    """A raw input line could not be parsed; message names the line."""


class EmptyInputError(SeqLabError):
    """An input file or record stream contained no usable data."""


class EmptyAfterFilterError(SeqLabError):
    """k-core filtering removed every record."""


class UnsampleableError(SeqLabError):
    """The exclusion set covers the whole item catalog."""


class InvalidIdError(SeqLabError):
    """An item ID is outside the vocabulary range."""


class InvalidTargetError(SeqLabError):
    """A loss or ranking target is PAD, MASK, or absent from the row."""


class InvalidCandidateError(SeqLabError):
    """A scoring candidate is the PAD token."""


class NumericInputError(SeqLabError):
    """A loss received a non-finite score."""


class EmptyLossError(SeqLabError):
    """A loss was asked to average over zero valid positions."""


class ConfigError(SeqLabError):
    """Inconsistent or incompatible configuration."""
