"""Exception hierarchy shared by every module."""


class DogeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DogeError, ValueError):
    """Operand shapes are incompatible for the named op."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class ContractError(DogeError, ValueError):
    """A documented precondition of a call was violated."""


class DataError(DogeError, ValueError):
    """Input data is malformed (bad token ids, empty domains, ...)."""


class ConfigError(DogeError, ValueError):
    """A configuration value is invalid; ``field`` names the key path."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
