"""Exception types shared across the package."""


class AdvFeatError(Exception):
    """Base class for all package-specific errors."""


class IncompatibleImageSize(AdvFeatError):
    """Image height or width not divisible by the backbone patch size."""


class LayerOutOfRange(AdvFeatError):
    """Requested transformer layer outside [1, num_layers]."""


class GradientUnavailable(AdvFeatError):
    """Backbone is inference-only and cannot provide input gradients."""


class DuplicateModelId(AdvFeatError):
    """An adapter with this model_id is already registered."""


class UnknownModelId(AdvFeatError):
    """model_id not found in the adapter registry (or unavailable)."""


class EmptyTrainingSet(AdvFeatError):
    """Mean estimation called with no images."""


class DimensionMismatch(AdvFeatError):
    """Feature / mean vector dimensions do not agree."""


class DegenerateFeature(AdvFeatError):
    """Centered feature norm below threshold; cosine undefined."""


class IdenticalImages(AdvFeatError):
    """PSNR calibration called with a zero perturbation."""


class IoFailure(AdvFeatError):
    """Image file could not be written or read back."""


class InsufficientData(AdvFeatError):
    """Too few labeled examples to fit a task head."""


class DegenerateBaseline(AdvFeatError):
    """TSA baseline equals clean performance; relative efficiency undefined."""


class QueryWithoutRelevants(AdvFeatError):
    """Retrieval query has an empty relevance set."""


class UnsupportedParameter(AdvFeatError):
    """Transform parameter outside its valid range."""


class IncompleteMatrix(AdvFeatError):
    """Transfer matrix has missing cells; cannot emit a report."""


class ManifestError(AdvFeatError):
    """Run manifest failed validation."""
