"""Exception hierarchy shared across the package."""


class VidsegError(Exception):
    """Base class for all errors raised by vidseg."""


class ShapeError(VidsegError, ValueError):
    """An argument has an incompatible shape; the message names both shapes."""


class StateError(VidsegError, RuntimeError):
    """An operation was invoked in an invalid order (e.g. backward before forward)."""


class UndefinedResultError(VidsegError, ArithmeticError):
    """A metric or reduction has no defined value for the given inputs."""


class StorageError(VidsegError, ValueError):
    """A file could not be parsed, or its contents are inconsistent."""


class MissingFileError(StorageError):
    """A referenced file does not exist; the message names the path."""
