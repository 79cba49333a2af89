"""Exception hierarchy shared across faaslab modules."""

from __future__ import annotations


class FaaslabError(Exception):
    """Base class for all faaslab errors."""


# --- workflow declaration errors ---------------------------------------

class WorkflowSyntaxError(FaaslabError):
    """The workflow document is not well-formed JSON."""


class SchemaError(FaaslabError):
    """A workflow field is missing, ill-typed, or unknown.

    `path` is a dotted field path such as "stages[1].options.ratio".
    """

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class SemanticError(FaaslabError):
    """The workflow parses but violates a structural invariant."""


# --- blob store errors --------------------------------------------------

class StoreError(FaaslabError):
    """Base class for object store failures."""


class NotFound(StoreError):
    """The requested key does not exist."""


class RangeError(StoreError):
    """A byte range exceeds the object bounds."""


class CapacityError(StoreError):
    """The on-disk backing has no space left."""


# --- analytic model errors ----------------------------------------------

class DomainError(FaaslabError):
    """A model operation received an out-of-domain argument."""


# --- methylation pipeline errors ------------------------------------------

class ParseError(FaaslabError):
    """A record line could not be parsed.

    `column` is 1-based; 0 means the failure is not tied to one column.
    """

    def __init__(self, column: int, reason: str):
        self.column = column
        self.reason = reason
        super().__init__(f"column {column}: {reason}")


class UnsortedInput(FaaslabError):
    """encode_block received records out of sort order."""


class Overflow(FaaslabError):
    """A field value does not fit the codec's varint bounds."""


class BadMagic(FaaslabError):
    """Payload does not start with the codec magic bytes."""


class ChecksumMismatch(FaaslabError):
    """Encoded block checksum does not match its payload."""


class Truncated(FaaslabError):
    """Encoded block ends before all declared data was read."""


# --- shuffle errors -------------------------------------------------------

class MissingPartition(StoreError):
    """A reducer's expected partition object is absent."""


# --- execution errors -----------------------------------------------------

class ValidationError(FaaslabError):
    """A workflow spec failed validation before execution."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class TaskError(FaaslabError):
    """A worker task failed; carries the worker index."""

    def __init__(self, worker: int, cause: BaseException):
        self.worker = worker
        self.cause = cause
        super().__init__(f"worker {worker}: {cause!r}")


class MemoryBudgetError(FaaslabError):
    """A task would exceed its memory budget."""


class ExecutionError(FaaslabError):
    """A stage failed; names the stage and wraps the task failure."""

    def __init__(self, stage_id: str, cause: BaseException):
        self.stage_id = stage_id
        self.cause = cause
        super().__init__(f"stage {stage_id!r} failed: {cause}")
