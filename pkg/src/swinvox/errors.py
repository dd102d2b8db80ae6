"""Exception types raised across the package."""


class SwinvoxError(Exception):
    """Base class for all contract violations."""


class DimensionError(SwinvoxError, ValueError):
    pass


class ConfigError(SwinvoxError, ValueError):
    pass


class ContractError(SwinvoxError, RuntimeError):
    pass


class NonFiniteError(SwinvoxError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class PoisonedGradientError(NonFiniteError):
    """The optimizer received a non-finite gradient; training must halt."""

    def __init__(self, message, step=None, name=None):
        super().__init__(message)
        self.step = step
        self.name = name


class DegenerateBatchError(SwinvoxError, ValueError):
    pass


class FormatError(SwinvoxError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class OccupancyError(SwinvoxError, ValueError):
    """Generated shape occupancy fell outside the accepted band; regenerate."""

    def __init__(self, message, fraction):
        super().__init__(message)
        self.fraction = fraction


class FingerprintMismatch(SwinvoxError, ValueError):
    def __init__(self, expected, actual):
        super().__init__(
            f"config fingerprint mismatch: checkpoint={expected} config={actual}"
        )
        self.expected = expected
        self.actual = actual
