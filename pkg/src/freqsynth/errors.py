"""Exception types shared across the package."""


class FreqSynthError(Exception):
    """Base class for all package errors."""


class ArgumentError(FreqSynthError, ValueError):
    pass


class ShapeError(FreqSynthError, ValueError):
    pass


class UnsupportedConfigError(FreqSynthError, ValueError):
    pass


class DegenerateInputError(FreqSynthError, ValueError):
    pass


class DomainError(FreqSynthError, ValueError):
    pass


class StateError(FreqSynthError, RuntimeError):
    pass


class FormatError(FreqSynthError, ValueError):
    """Malformed binary file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(FreqSynthError, RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, epoch, pair, components):
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, pair {pair}: {parts}")
        self.epoch = epoch
        self.pair = pair
        self.components = dict(components)
