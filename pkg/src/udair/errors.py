"""Exception hierarchy.

Each family maps to a CLI exit code (see ``EXIT_CODES``).
"""


class UdairError(Exception):
    exit_code = 1


class ConfigurationError(UdairError, ValueError):
    exit_code = 2


class ParameterRangeError(ConfigurationError):
    """A degradation parameter lies outside its admissible range."""


class ShapeError(UdairError, ValueError):
    exit_code = 2


class DataError(UdairError):
    exit_code = 3


class PairingError(DataError):
    pass


class ImageFormatError(DataError):
    pass


class SizeError(DataError, ValueError):
    pass


class CheckpointFormatError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericError(UdairError, ArithmeticError):
    exit_code = 4


class SampleCountError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "configuration": ConfigurationError.exit_code,
    "data": DataError.exit_code,
    "numeric": NumericError.exit_code,
}
