"""Exception types shared across the package."""


class LkmsegError(Exception):
    pass


class ShapeError(LkmsegError):
    pass


class BroadcastError(ShapeError):
    pass


class AxisError(LkmsegError):
    pass


class GradError(LkmsegError):
    pass


class GroupError(LkmsegError):
    pass


class DomainError(LkmsegError):
    pass


class ModeError(LkmsegError):
    pass


class PartitionError(LkmsegError):
    pass


class ConfigError(LkmsegError):
    pass


class CheckpointError(LkmsegError):
    pass


class TargetError(LkmsegError):
    pass


class IoError(LkmsegError):
    pass


class NonFiniteError(LkmsegError):
    pass


class GenError(LkmsegError):
    pass
