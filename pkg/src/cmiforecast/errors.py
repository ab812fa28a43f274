"""Exception hierarchy shared across the package.

Each error carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class CmiError(Exception):
    exit_code = 1


class ConfigError(CmiError, ValueError):
    exit_code = 1


class ShapeError(CmiError, ValueError):
    exit_code = 1


class ContractViolation(CmiError, ValueError):
    exit_code = 1


class DataError(CmiError, ValueError):
    exit_code = 2


class IngestionError(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class InsufficientBatch(DataError):
    pass


class DegenerateData(DataError):
    pass


class IncompatibleCheckpoint(DataError):
    pass


class TrainingDiverged(CmiError, FloatingPointError):
    exit_code = 3


class CheckpointError(DataError):
    code = "checkpoint"


class BadMagic(CheckpointError):
    code = "bad-magic"


class VersionMismatch(CheckpointError):
    code = "version-mismatch"


class TruncatedFile(CheckpointError):
    code = "truncated"
