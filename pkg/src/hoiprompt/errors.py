"""Exception hierarchy.

``exit_code`` on each family is what the command-line entry point returns.
"""


class HOIError(Exception):
    exit_code = 1


class ConfigError(HOIError):
    exit_code = 2


class InvalidConfigError(ConfigError, ValueError):
    """A model or generator configuration that cannot be built."""


class DataError(HOIError):
    exit_code = 3


class DatasetParseError(DataError, ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RegistryError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SplitError(DataError, ValueError):
    """Split request outside the available category range."""


class ContaminationError(DataError):
    """Checkpoint was not trained under the split being evaluated."""


class ChecksumError(DataError):
    pass


class ShapeError(HOIError, ValueError):
    pass


class NumericError(HOIError, ArithmeticError):
    pass


class DomainError(HOIError, ValueError):
    pass


class InfeasibleError(HOIError, ValueError):
    pass


class ProviderError(HOIError):
    exit_code = 4

    def __init__(self, message, attempts=0, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class RetrievalError(ProviderError):
    pass


class EncodingError(ProviderError):
    pass


class DivergenceError(HOIError):
    exit_code = 5

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class InvalidInputError(HOIError, ValueError):
    exit_code = 2
