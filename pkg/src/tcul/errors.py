"""Exception hierarchy used across the package."""


class TCULError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TCULError, ValueError):
    pass


# dataio
class DataIOError(TCULError):
    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class BadMagic(DataIOError):
    pass


class VersionMismatch(DataIOError):
    pass


class TruncatedFile(DataIOError):
    pass


class CountMismatch(DataIOError):
    pass


class MalformedRow(DataIOError):
    pass


class ParseError(DataIOError):
    def __init__(self, message, line, path=None):
        self.line = line
        super().__init__(f"line {line}: {message}", path)


# synthgen
class GenerationInfeasible(TCULError):
    pass


# embedder / trainer / selection
class DimensionMismatch(TCULError, ValueError):
    pass


class NoValidTriplets(TCULError):
    pass


class InsufficientLabels(TCULError):
    pass


# clustering
class ZeroNormVector(TCULError, ValueError):
    pass


class TooFewSamples(TCULError, ValueError):
    pass


# evaluator
class EmptyGallery(TCULError):
    pass


class UndefinedAP(TCULError, ValueError):
    pass
