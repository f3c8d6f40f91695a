"""Exception hierarchy shared across the engine."""


class KareError(Exception):
    """Base class for all engine errors."""


class CohortError(KareError):
    """Invalid cohort data; message names the patient and field involved."""


class GraphLookupError(KareError):
    """A requested node is not present in the external graph."""


class ConfigurationError(KareError):
    """A configuration value or search produced no usable result."""


class MappingError(KareError):
    """A term has no entry in the entity/relation mapping."""


class TemplateError(KareError):
    """Prompt template rendering failed."""


class BackendError(KareError):
    """A chat/embedding backend call failed."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class IndexBuildError(KareError):
    """The community index is inconsistent or incomplete."""


class DatasetError(KareError):
    """Fine-tune dataset emission hit invalid or duplicate samples."""


class MetricsError(KareError):
    """Prediction/label key sets disagree or hold invalid values."""


class PipelineError(KareError):
    """A pipeline stage failed; message names the stage."""
