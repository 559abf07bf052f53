"""Exception types shared across the package."""


class FreConvError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FreConvError, ValueError):
    pass


class ParameterError(FreConvError, ValueError):
    pass


class ConfigError(FreConvError, ValueError):
    pass


class SizeOverflowError(FreConvError, OverflowError):
    pass


class FormatError(FreConvError, ValueError):
    """Malformed FRTN file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GraphError(FreConvError, ValueError):
    """Failure while validating or executing an architecture graph."""

    def __init__(self, message: str, node_id: str | None = None):
        prefix = f"node {node_id!r}: " if node_id is not None else ""
        super().__init__(prefix + message)
        self.node_id = node_id


class TrainingError(FreConvError, RuntimeError):
    pass


class GradCheckError(FreConvError, AssertionError):
    pass
