"""Exception hierarchy.

Each class carries the process exit code and a short machine-readable code
used by the command line front end.
"""


class DiversifyError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(DiversifyError, ValueError):
    exit_code = 2
    code = "config_error"

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class DataError(DiversifyError, ValueError):
    exit_code = 3
    code = "data_error"


class ParseError(DataError):
    code = "parse_error"

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ShapeError(DataError):
    code = "shape_error"


class CheckpointError(DataError):
    code = "checkpoint_error"


class NumericError(DiversifyError, ArithmeticError):
    exit_code = 4
    code = "numeric_error"


class NonDeterministicError(NumericError):
    code = "nondeterministic"
