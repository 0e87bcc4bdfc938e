"""Define package errors."""


class GenRLError(Exception):
    """Define a base error."""

    ...


class InvalidConfig(GenRLError):
    """Define an error related to an invalid configuration or grid spec."""

    ...


class SeedCollision(InvalidConfig):
    """Define an error related to overlapping seed pools."""

    ...


class InfeasibleSpec(GenRLError):
    """Define an error related to walls that cannot fit in a grid."""

    ...


class EpisodeFinished(GenRLError):
    """Define an error related to stepping a finished episode."""

    ...


class InvalidAction(GenRLError):
    """Define an error related to an action id outside the action space."""

    ...


class ShapeMismatch(GenRLError):
    """Define an error related to incongruent array shapes."""

    ...


class NoForwardRecorded(GenRLError):
    """Define an error related to a backward pass without a recorded forward."""

    ...


class MaskMismatch(GenRLError):
    """Define an error related to a feature mask that does not fit a predictor."""

    ...


class NonFiniteLoss(GenRLError):
    """Define an error related to a NaN or infinite loss."""

    ...


class FrozenPredictorViolation(GenRLError):
    """Define an error related to a frozen predictor being modified."""

    ...


class ZeroVariance(GenRLError):
    """Define an error related to a constant correlation input."""

    ...


class AllFiltered(GenRLError):
    """Define an error related to no feature passing selection."""

    ...


class TooFewSamples(GenRLError):
    """Define an error related to an undersized training set."""

    ...


class EmptyEvalSet(GenRLError):
    """Define an error related to scoring over zero environments."""

    ...


class WeightFileError(GenRLError):
    """Base weight file error."""

    ...


class BadMagic(WeightFileError):
    """Weight file does not start with the expected magic bytes."""

    ...


class VersionUnsupported(WeightFileError):
    """Weight file version is not supported."""

    ...


class TruncatedFile(WeightFileError):
    """Weight file ended before its declared payload."""

    ...


class ManifestError(GenRLError):
    """Base dataset manifest error."""

    ...


class MissingWeights(ManifestError):
    """A weight file named by the manifest does not exist."""

    ...


class HashMismatch(ManifestError):
    """A weight file does not match its recorded hash."""

    ...


class EmptyInput(GenRLError):
    """Define an error related to reporting on no data."""

    ...


class UsageError(GenRLError):
    """Define an error related to invalid command-line usage."""

    ...
