"""Exception hierarchy shared across the toolkit."""


class TransmixError(Exception):
    """Base class; the CLI maps any subclass to exit code 1."""


class ShapeError(TransmixError, ValueError):
    pass


class ContractError(TransmixError, ValueError):
    pass


class ConfigError(TransmixError, ValueError):
    pass


class FormatError(TransmixError, ValueError):
    pass
