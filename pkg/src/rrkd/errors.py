"""Exception hierarchy. The CLI maps each family to its own exit code."""


class RRKDError(Exception):
    pass


class ShapeError(RRKDError, ValueError):
    pass


class TapeError(RRKDError, RuntimeError):
    pass


class ConfigError(RRKDError, ValueError):
    pass


class DataError(RRKDError, ValueError):
    pass


class CheckpointError(RRKDError, ValueError):
    pass
