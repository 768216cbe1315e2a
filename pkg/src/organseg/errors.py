"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or byte stream does not match the expected format."""


class BoundsError(ValueError):
    """A rectangle does not fit inside the image it is applied to."""


class ShapeError(ValueError):
    """A tensor does not have the shape a layer expects."""


class RegistryParseError(ValueError):
    """A registry file line could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class RegistryValidationError(ValueError):
    """A registry is well formed but violates the one-spec-per-organ rule."""


class TrainingDataError(ValueError):
    """Training data cannot support the requested model."""


class TrainingDivergence(RuntimeError):
    """The training loss became non-finite."""
