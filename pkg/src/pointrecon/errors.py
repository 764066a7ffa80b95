"""Exception types raised across the package."""


class PointReconError(Exception):
    """Base class for all package errors."""


# geometry
class NonFinite(PointReconError):
    pass


class BadCount(PointReconError):
    pass


class EmptySet(PointReconError):
    pass


class BadSpec(PointReconError):
    pass


# tokenizer
class BadRatio(PointReconError):
    pass


# model
class BadConfig(PointReconError):
    pass


class ShapeMismatch(PointReconError):
    pass


class MissingTaps(PointReconError):
    pass


class NotNormalized(PointReconError):
    pass


# losses
class BadBatch(PointReconError):
    pass


class CountMismatch(PointReconError):
    pass


# teachers / binary formats
class BadMagic(PointReconError):
    pass


class Truncated(PointReconError):
    pass


class DuplicateId(PointReconError):
    pass


class BadClass(PointReconError):
    pass


class MissingPrompt(PointReconError):
    pass


# data
class TooManyClasses(PointReconError):
    pass


class InsufficientSamples(PointReconError):
    pass


# harness
class MissingTeacher(PointReconError):
    pass


class VariantMismatch(PointReconError):
    pass


class BadSchedule(PointReconError):
    pass
