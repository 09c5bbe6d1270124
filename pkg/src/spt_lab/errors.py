"""Exception types shared across the package."""


class SptLabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SptLabError):
    """An operation received an argument outside its documented domain."""


class InvalidModelError(SptLabError):
    """A market model failed validation (shape, rank, or parameter range)."""


class IntegrationFailureError(SptLabError):
    """A path produced a non-finite state during integration."""

    def __init__(self, message, path_index=None, step=None):
        super().__init__(message)
        self.path_index = path_index
        self.step = step


class NumericFailureError(SptLabError):
    """A numeric routine (quadrature, linear solve) failed to converge."""


class ConfigError(SptLabError):
    """An experiment config failed validation; carries all messages at once."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))
