"""Error taxonomy shared by the library and the CLI.

Each error carries a short machine-parsable code and the process exit status
the CLI maps it to (0 ok, 2 config, 3 data, 4 divergence).
"""

from __future__ import annotations


class MTDistillError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_status = 1


class ConfigError(MTDistillError):
    """Invalid configuration, unknown names, missing checkpoints, bad flags."""

    code = "config"
    exit_status = 2


class DataError(MTDistillError):
    """Rejected or undecodable input data."""

    code = "data"
    exit_status = 3


class NonFiniteError(DataError):
    """NaN or Inf values where finite numbers are required; the trainer
    translates this into DivergenceError when it happens mid-run."""


class DivergenceError(MTDistillError):
    """Training produced a non-finite loss."""

    code = "divergence"
    exit_status = 4
