"""Exception hierarchy shared by every subsystem.

Each class carries a stable integer ``code`` so the CLI can map failures to
exit statuses and the dataset reader can report distinct error codes.
"""


class CLDError(Exception):
    code = 1


class ShapeError(CLDError, ValueError):
    code = 10


class DegenerateError(CLDError, ValueError):
    """Zero-norm vectors, single-element batches and similar degenerate inputs."""

    code = 11


class ContractError(CLDError, RuntimeError):
    """A documented precondition was violated by the caller."""

    code = 12


class ConfigError(CLDError, ValueError):
    code = 2


class SnapshotError(CLDError, ValueError):
    code = 13


class DataError(CLDError, ValueError):
    code = 14


class SplitError(DataError):
    code = 15


class EpisodeError(DataError):
    code = 16


class ContainerError(CLDError, IOError):
    code = 3


class CorruptHeaderError(ContainerError):
    code = 31


class VersionMismatchError(ContainerError):
    code = 32


class MissingArtifactError(CLDError, FileNotFoundError):
    code = 4


class DivergenceError(CLDError, FloatingPointError):
    """Training produced a non-finite loss; ``record`` holds the diagnostic."""

    code = 20

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
