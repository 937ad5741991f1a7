"""Exception types shared across the package."""


class VanishPatchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VanishPatchError):
    """A configuration value is invalid or inconsistent."""


class PlacementError(VanishPatchError):
    """A patch placement does not fit inside the target image."""


class DatasetError(VanishPatchError):
    """A dataset directory or annotation record is missing or malformed."""


class DivergenceError(VanishPatchError):
    """An optimization produced NaN/Inf; carries enough context to reproduce."""


class EvaluationError(VanishPatchError):
    """An evaluation could not produce a meaningful result."""
