class SrpmoeError(Exception):
    """Base class for every error raised by srpmoe."""


class ShapeError(SrpmoeError, ValueError):
    pass


class ConfigError(SrpmoeError, ValueError):
    pass


class FormatError(SrpmoeError, ValueError):
    """Manifest, embedding file or checkpoint does not match its declared layout."""


class DataError(SrpmoeError, ValueError):
    pass


class ContractError(SrpmoeError, RuntimeError):
    """An operation was called outside its precondition (invalid action, empty mask, ...)."""


class DivergenceError(SrpmoeError, RuntimeError):
    """Non-finite gradient or loss; the update was not applied."""
