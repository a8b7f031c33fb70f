"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``dualsys.cli``).
"""


class DualsysError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DualsysError, ValueError):
    pass


class ConfigError(DualsysError, ValueError):
    pass


class NumericError(DualsysError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class FormatError(DualsysError, ValueError):
    """Malformed binary or text file; ``offset`` points at the bad byte/line."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class FrozenViolationError(DualsysError, RuntimeError):
    pass


class MissingArtifactError(DualsysError, FileNotFoundError):
    pass


class DegenerateRankError(DualsysError, ValueError):
    def __init__(self, rank, wanted):
        super().__init__(f"data has rank {rank}, need at least {wanted}")
        self.rank = rank


class StartupError(DualsysError, RuntimeError):
    pass
