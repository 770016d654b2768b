"""Exception types shared across the pipeline.

Argument errors (bad k, mismatched dimensions, missing classes, ...) use the
built-in ValueError; the classes here cover failures with a named contract.
"""


class PipelineError(Exception):
    """Base class for all package-specific failures."""


class MalformedFileError(PipelineError):
    """Raw file does not have the size/layout implied by its header or args."""


class CorruptSampleError(PipelineError):
    """A decoded sample is outside the valid range for its bit depth."""


class IngestError(PipelineError):
    """File could not be ingested (unreadable, multi-frame, wrong modality)."""


class SchemaError(PipelineError):
    """A manifest row violates the manifest schema or a record invariant."""


class EmptyContentError(PipelineError):
    """An operation that requires foreground content got an empty image."""


class PhantomSpecError(PipelineError):
    """A phantom specification violates its geometric invariants."""


class ConfigurationError(PipelineError):
    """A pipeline/experiment configuration is inconsistent or incomplete."""


class EvaluationError(PipelineError):
    """An evaluation has no usable data (e.g. every image was excluded)."""
