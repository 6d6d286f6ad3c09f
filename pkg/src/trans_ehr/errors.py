class TransError(Exception):
    """Base class for package errors."""


class DimensionError(TransError, ValueError):
    """Shape mismatch inside a tensor primitive or feature assembly."""


class CohortParseError(TransError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(TransError, ValueError):
    pass


class ConfigError(TransError, ValueError):
    pass


class OptimizerError(TransError, FloatingPointError):
    pass


class GradCheckError(TransError, RuntimeError):
    pass


class NumericError(TransError, FloatingPointError):
    pass


class TrainingError(TransError, RuntimeError):
    pass


class ExplanationError(TransError, ValueError):
    pass
