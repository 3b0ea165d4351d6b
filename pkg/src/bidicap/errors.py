"""Exception types shared across the package."""


class BidicapError(Exception):
    """Base class for all package errors."""


class ShapeError(BidicapError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(BidicapError, ValueError):
    """An operation was called outside its contract."""


class MaskError(BidicapError, ValueError):
    """An attention mask blocks every key for some query."""


class InputError(BidicapError, ValueError):
    """Invalid user-supplied data (empty corpus, empty region set, ...)."""


class PairingError(BidicapError, ValueError):
    """A caption record cannot be paired (fewer than two references)."""


class ConfigError(BidicapError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(BidicapError, RuntimeError):
    """A checkpoint file is malformed, truncated or mismatched."""


class TrainingError(BidicapError, RuntimeError):
    """Training aborted (e.g. on a non-finite loss)."""
