"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or array shapes are incompatible with an operation."""


class DegenerateInputError(ValueError):
    """Input is valid in form but makes the requested quantity undefined."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class FormatError(ValueError):
    """A file on disk does not follow the expected layout."""


class TruncatedPayloadError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(ValueError):
    """Bad run configuration (unknown key, wrong type, invalid value)."""
