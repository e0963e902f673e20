"""Exception hierarchy. CLI exit codes hang off these classes."""


class HCTError(Exception):
    exit_code = 1


class ConfigError(HCTError, ValueError):
    exit_code = 2


class DimensionError(HCTError, ValueError):
    exit_code = 2


class UsageError(HCTError, ValueError):
    exit_code = 2


class DataError(HCTError, ValueError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateInputError(HCTError, ValueError):
    exit_code = 4


class NumericalError(HCTError, FloatingPointError):
    exit_code = 4
