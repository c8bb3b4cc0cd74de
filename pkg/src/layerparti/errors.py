"""Exception hierarchy. The CLI maps each family onto an exit code."""


class LayerPartiError(Exception):
    exit_code = 3


class ConfigError(LayerPartiError, ValueError):
    exit_code = 1


class UsageError(LayerPartiError, ValueError):
    exit_code = 1


class ShapeError(LayerPartiError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 1


class DataError(LayerPartiError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class VocabMismatchError(DataError):
    pass


class InvariantViolation(LayerPartiError, RuntimeError):
    exit_code = 3
