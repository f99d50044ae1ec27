"""Exception hierarchy shared across the pipeline."""


class PCCError(Exception):
    """Base class for all pipeline errors."""


class ShapeError(PCCError, ValueError):
    pass


class ParseError(PCCError, ValueError):
    pass


class NetworkError(PCCError):
    pass


class EmptyResponse(PCCError):
    pass


class ScriptExhausted(PCCError):
    pass


class FormatError(PCCError, ValueError):
    """A dataset tree or label file is malformed. The message names the offending path or class."""


class ConfigError(PCCError, ValueError):
    pass


class DivergenceError(PCCError, RuntimeError):
    pass
