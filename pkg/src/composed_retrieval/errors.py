"""Exception types shared across the package.

Errors are split into configuration problems (caught before any work
starts) and runtime failures (data, backends, numerics). The CLI maps
the two groups to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid configuration; nothing has been executed yet."""


class InvalidConfig(ConfigError):
    pass


class SchemaTooLarge(ConfigError):
    """Synthetic attribute schema enumerates more tuples than the cap."""


class LambdaOutOfRange(ConfigError):
    pass


class PipelineError(RuntimeError):
    """Failures while generating triplets."""


class InsufficientPairs(PipelineError):
    """The sampling strategy cannot yield the requested number of distinct pairs."""


class MissingMetaClass(PipelineError):
    """same_meta_class sampling requires every image to carry a meta class."""


class BackendUnavailable(PipelineError):
    """A caption/reformulation backend failed after exhausting retries."""


class EmptyCaption(PipelineError):
    pass


class EmptyReformulation(PipelineError):
    pass


class ModelError(RuntimeError):
    """Failures in the network or training loop."""


class TokenOutOfRange(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


# The spec-level contracts name both; they are the same failure.
DimensionMismatch = ShapeMismatch


class ZeroVector(ModelError):
    """Cosine similarity is undefined for a zero row."""


class NonPositiveTemperature(ModelError):
    pass


class DanglingId(ModelError):
    """A triplet references an image id missing from the collection."""


class NonFiniteLoss(ModelError):
    """Training aborted because the loss went NaN/Inf."""


class EvalError(RuntimeError):
    """Failures in index building or metric computation."""


class DuplicateId(EvalError):
    pass


class ZeroEmbedding(EvalError):
    pass


class EmptyIndex(EvalError):
    pass


class MissingRanking(EvalError):
    pass


class GtNotInSubset(EvalError):
    pass


class MissingRankedLists(EvalError):
    """Gallery export needs a report that retained per-query rankings."""
