"""Exception types shared across the package."""


class ConfigError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class InvalidRotationError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite values during training or sampling."""


class DatasetFormatError(IOError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")
        self.offset = offset
