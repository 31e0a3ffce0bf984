"""Exception hierarchy shared across the package.

CLI exit-code mapping: FormatError / GeometryError / ConfigError exit with 3
(data problems), NumericalError and subclasses exit with 4 (run failures).
"""


class ProxfwiError(Exception):
    """Base class for all package errors."""


class FormatError(ProxfwiError):
    """Corrupt or inconsistent on-disk data (bad magic, truncation, NaNs)."""


class GeometryError(ProxfwiError):
    """Invalid grid, acquisition, or inclusion geometry."""


class ConfigError(ProxfwiError):
    """Malformed run configuration or incompatible option combination."""


class StateError(ProxfwiError):
    """Operation requires state that has not been initialized or is stale."""


class NumericalError(ProxfwiError):
    """Divergent iteration, non-finite iterate, or failed numerical step."""


class FactorizationError(NumericalError):
    """Sparse factorization failed (singular or structurally deficient pivot)."""


class DenoiserPipeError(NumericalError):
    """External denoiser subprocess failed or returned an unusable grid."""
