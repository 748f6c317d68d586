"""Exception types shared across the package."""


class PspError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PspError):
    """Operands have incompatible shapes."""


class ParameterError(PspError):
    """A hyperparameter or argument lies outside its legal domain."""


class ContractError(PspError):
    """An API precondition was violated by the caller."""


class DataError(PspError):
    """Input data is malformed or internally inconsistent."""


class NumericError(PspError):
    """A computation produced non-finite values."""


class FormatError(PspError):
    """A serialized artifact has an unrecognized or corrupt layout."""
