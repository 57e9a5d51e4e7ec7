"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class VlabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VlabError):
    """Operands have incompatible shapes. The message names both shapes."""


class ContractError(VlabError):
    """A call violates an operation's contract (e.g. non-scalar loss)."""


class ConfigError(VlabError):
    """Invalid or inconsistent configuration value."""


class DataError(VlabError):
    """Missing or malformed data (files, manifests, token sequences)."""


class NumericError(VlabError):
    """Numerical failure during training (NaN gradient, diverged loss)."""
