"""Exception types shared across the package."""


class SmartgenError(Exception):
    """Base class; ``category`` is what the CLI prints on failure."""

    category = "error"


class ValidationError(SmartgenError, ValueError):
    category = "validation"


class SchemaError(SmartgenError, ValueError):
    """An artifact file has an unknown or missing schema version."""

    category = "schema"


class ConfigError(SmartgenError, ValueError):
    """Invalid configuration; ``field`` names the offending path."""

    category = "config"

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class NoDrivableAreaError(SmartgenError, ValueError):
    category = "geometry"

    def __init__(self, message="no drivable area"):
        super().__init__(message)


class PlacementError(SmartgenError, RuntimeError):
    """Raised when the generator cannot place the requested agents."""

    category = "synth"

    def __init__(self, placed, requested):
        self.placed = placed
        self.requested = requested
        super().__init__(f"placed {placed} of {requested} agents without gap violation")


class VocabularyMismatchError(SmartgenError, ValueError):
    category = "vocab"


class NonFiniteError(SmartgenError, FloatingPointError):
    category = "numeric"

    def __init__(self, op):
        self.op = op
        super().__init__(f"non-finite values produced by {op}")


class ShapeError(SmartgenError, ValueError):
    category = "shape"

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")
