"""Exception hierarchy and process exit codes."""


class MemWarpError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractError(MemWarpError):
    """An operation was called with inputs violating its contract
    (shape mismatch, non-finite values, out-of-range arguments)."""

    exit_code = 1


class ConfigError(MemWarpError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(MemWarpError):
    """Malformed dataset, volume file, or unsupported datatype."""

    exit_code = 3


class NumericError(MemWarpError):
    """Numerical failure during optimization (NaN / non-finite loss)."""

    exit_code = 4


class DegenerateMemoryError(MemWarpError):
    """Memory matrix has a zero-norm slot column and cannot be addressed."""

    exit_code = 1


class UndefinedMetricError(MemWarpError):
    """A metric is undefined for the given inputs (e.g. surface distance
    of an empty mask)."""

    exit_code = 1


class UnsupportedModeError(ConfigError):
    """Requested capability is absent from the checkpoint (e.g. segmentation
    from a model trained without the memory module)."""

    exit_code = 2
