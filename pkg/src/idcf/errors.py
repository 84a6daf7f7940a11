class IdcfError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(IdcfError, ValueError):
    pass


class ConfigError(IdcfError, ValueError):
    pass


class TrainingError(IdcfError, RuntimeError):
    pass


class ParseError(IdcfError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DataValidationError(IdcfError, ValueError):
    pass


class ColdStartError(IdcfError, ValueError):
    pass


class DegenerateNormalizationError(IdcfError, ArithmeticError):
    pass


class EvaluationError(IdcfError, ValueError):
    pass


class CheckpointError(IdcfError, ValueError):
    pass
