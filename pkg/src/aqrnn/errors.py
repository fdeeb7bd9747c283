"""Exception types.  The CLI maps them onto process exit codes."""


class AQRNNError(Exception):
    exit_code = 1


class ConfigError(AQRNNError, ValueError):
    exit_code = 2


class DataError(AQRNNError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Model file with a bad header, version or truncated payload."""


class NumericalError(AQRNNError, ArithmeticError):
    exit_code = 4


class DimensionError(AQRNNError, ValueError):
    exit_code = 4
