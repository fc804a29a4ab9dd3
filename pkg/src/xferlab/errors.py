"""Exception types shared across the package."""


class XferlabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(XferlabError, ValueError):
    """Tensor or array shapes are incompatible for the requested operation."""


class DomainError(XferlabError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ContractError(XferlabError, ValueError):
    """A documented precondition was violated by the caller."""


class DataFormatError(XferlabError, ValueError):
    """An on-disk file does not conform to the documented format."""


class ConfigError(XferlabError, ValueError):
    """An experiment configuration is invalid or incomplete."""
