"""Exception types shared across the package.

Every error raised on a contract violation carries enough detail to see
what went wrong without a debugger: offending shapes, key paths, class
ids, file line numbers.
"""
from __future__ import annotations


class GraphRebalError(Exception):
    """Base class for all package errors."""


class ShapeError(GraphRebalError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(GraphRebalError):
    """A function precondition or internal invariant was violated."""


class ConfigError(GraphRebalError):
    """Invalid configuration value or unknown key."""


class IngestionError(GraphRebalError):
    """Dataset files are malformed or inconsistent."""


class SplitError(GraphRebalError):
    """Requested train/val/test quotas cannot be met."""


class SamplingError(GraphRebalError):
    """A sampling routine ran out of candidates or retries."""


class TrainingDiverged(GraphRebalError):
    """A non-finite loss was produced during training."""
