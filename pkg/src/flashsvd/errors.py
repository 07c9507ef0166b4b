"""Exception hierarchy shared by every module."""


class FlashSVDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FlashSVDError, ValueError):
    pass


class NumericError(FlashSVDError, ValueError):
    pass


class RankError(FlashSVDError, ValueError):
    pass


class ConfigError(FlashSVDError, ValueError):
    pass


class InfeasibleError(FlashSVDError, ValueError):
    pass


class BudgetError(FlashSVDError):
    """A tile plan's on-chip working set exceeds the SRAM budget."""

    def __init__(self, message, buffer=None, report=None):
        super().__init__(message)
        self.buffer = buffer
        self.report = report


class AccountingError(FlashSVDError):
    """Meter misuse: double free, unknown handle, or a leaked transient."""


class FormatError(FlashSVDError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
