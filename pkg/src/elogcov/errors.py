"""Exception hierarchy shared by the elog codec, collector and report tools."""


class ElogError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParam(ElogError, ValueError):
    pass


class InvalidRange(InvalidParam):
    """An execution range with start >= end."""


class BlockError(ElogError):
    """A block could not be decoded. ``offset`` is the block's byte offset, if known."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset

    def __str__(self):
        msg = super().__str__()
        if self.offset is not None:
            return f"{msg} (block at offset {self.offset})"
        return msg


class TruncatedBlock(BlockError):
    """The byte stream ended inside a block header or payload."""


class MalformedExecFrame(BlockError):
    """An exec frame whose payload length is not 8 + 20*k with k >= 1."""


class EmptyFrame(ElogError, ValueError):
    pass


class ClosedCollector(ElogError):
    pass


class CollectorFailed(ElogError):
    """The writer hit a sink failure; the collector no longer accepts events."""


class SinkError(OSError):
    """A sink write failed. ``stats`` holds the counters at the time of failure."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class MalformedLineMap(ElogError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class SymbolizerError(ElogError):
    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class ScriptError(ElogError):
    """A mock-host script is not well formed."""
