"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (empty batch, T=0, bad percent...)."""


class StructuralError(ValueError):
    """Shapes or layer structure do not line up."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite values are required."""


class FormatError(ValueError):
    """A file on disk does not match the format it claims to be."""
