class TFoodError(Exception):
    """Base class for every failure raised by the modules package."""


class DimensionError(TFoodError):
    pass


class NumericError(TFoodError):
    pass


class InputError(TFoodError):
    pass


class FormatError(TFoodError):
    """Corrupt or truncated file; the message names the byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(TFoodError):
    pass
