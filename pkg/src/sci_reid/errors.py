"""Exception hierarchy shared across the package."""


class SciError(Exception):
    """Base class for all package errors."""


class ContractError(SciError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ContractError):
    """A vector with zero norm was supplied where a direction is required."""


class DataError(SciError):
    """Dataset content or labels are inconsistent."""


class ManifestError(DataError):
    """Dataset manifest is malformed."""


class BlobLengthError(DataError):
    """Image blob size disagrees with the manifest."""


class VersionMismatchError(DataError):
    """On-disk format version is not supported."""


class CheckpointError(DataError):
    """Checkpoint file is malformed."""


class EvaluationError(SciError):
    """Evaluation cannot produce a result (e.g. no valid queries)."""
