"""Exception hierarchy shared by every subpackage.

The CLI maps :class:`ConfigurationError` to exit code 2 and
:class:`NumericError` to exit code 3.
"""


class DasError(Exception):
    pass


class ConfigurationError(DasError):
    pass


class DimensionError(DasError, ValueError):
    pass


class ContractError(DasError):
    pass


class TapeError(ContractError):
    pass


class NumericError(DasError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class InversionError(DasError):
    pass


class DegenerateInputError(DasError):
    pass


class FormatError(DasError):
    pass
