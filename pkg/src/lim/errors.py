"""Exception hierarchy shared by all lim modules."""


class LimError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LimError, ValueError):
    pass


class RankError(LimError, ValueError):
    pass


class DomainError(LimError, ValueError):
    pass


class EmptyReductionError(LimError, ValueError):
    pass


class DegenerateBatchError(LimError, ValueError):
    pass


class FormatError(LimError, ValueError):
    """Malformed WAV, manifest, checkpoint or tensor-container file."""


class ManifestError(LimError, ValueError):
    pass


class TooShortError(LimError, ValueError):
    pass


class InsufficientDataError(LimError, ValueError):
    pass


class CoverageError(LimError, ValueError):
    pass


class DegenerateError(LimError, ValueError):
    """Zero-norm embeddings, all-zero impulse responses and similar."""


class EmptyBatchError(LimError, ValueError):
    pass


class IncompatibleCheckpointError(LimError, ValueError):
    pass


class NonFiniteGradientError(LimError, FloatingPointError):
    def __init__(self, step, name):
        super().__init__(f"non-finite gradient at step {step} in tensor {name!r}")
        self.step = step
        self.name = name


class LabelMapError(LimError, KeyError):
    pass


class ConfigError(LimError, ValueError):
    pass
