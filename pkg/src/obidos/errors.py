"""Exception hierarchy shared across the engine, the service and the CLI."""


class ObidosError(Exception):
    """Base class for every error raised by this package."""


class InvalidReplicaSet(ObidosError):
    pass


class InvalidQuery(ObidosError):
    pass


class InvalidPath(ObidosError, ValueError):
    pass


class InvalidRecord(ObidosError):
    pass


class DeserializeError(ObidosError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class SourceNotInReplicaSet(ObidosError):
    pass


class PathNotFound(ObidosError):
    pass


class SourceUnavailable(ObidosError):
    pass


class UnknownSource(ObidosError):
    pass


class GeneratorRefused(ObidosError):
    pass


class BlobNotFound(ObidosError):
    pass


class UnknownReplicaSet(ObidosError):
    pass


class DuplicateReplicaSet(ObidosError):
    pass


class AccessDenied(ObidosError):
    pass


class ShareFailed(ObidosError):
    pass


class SenderUnavailable(ObidosError):
    pass


class Unauthenticated(AccessDenied):
    """Missing, unknown or expired api key (as opposed to a valid key used out of scope)."""
