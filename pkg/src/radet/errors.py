"""Exception types shared across the package."""


class RadetError(Exception):
    """Base class for all package errors."""


class ShapeError(RadetError):
    """Tensor shapes are incompatible. The message names both shapes."""


class TapeError(RadetError):
    """Misuse of the gradient tape (e.g. replaying backward twice)."""


class ValidationError(RadetError):
    """A declarative spec/config violates one of its invariants."""


class ConfigError(RadetError):
    """Bad user-supplied configuration (CLI exit code 2)."""


class MissingArtifactError(RadetError):
    """A required file (checkpoint, manifest, image) is absent (CLI exit code 3)."""


class ScenePlacementError(RadetError):
    """Synthetic scene objects overlap beyond the allowed bound."""
