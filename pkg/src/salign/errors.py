"""Exception types shared across the package."""


class SalignError(Exception):
    """Base class for all package errors."""


class ConfigError(SalignError):
    """Config file failed to parse or violated an invariant."""


class DataError(SalignError):
    """Dataset files missing, corrupt, or inconsistent with the config."""


class CheckpointError(SalignError):
    """Checkpoint missing, corrupt, wrong version, or config mismatch on resume."""


class FrozenModelError(SalignError):
    """Attempted parameter update on a frozen model."""


class NumericFault(SalignError):
    """Non-finite value encountered in a gradient or loss computation."""


class DivergenceError(SalignError):
    """Training loss exceeded the divergence guard."""
