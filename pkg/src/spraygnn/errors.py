"""Exception hierarchy. Every failure the CLI reports maps to one class here."""


class SprayGNNError(Exception):
    """Base class for all package errors."""


class ParallelAxis(SprayGNNError):
    pass


class InsufficientScans(SprayGNNError):
    pass


class NonMonotoneLayers(SprayGNNError):
    pass


class MissingFile(SprayGNNError):
    pass


class SchemaVersionMismatch(SprayGNNError):
    pass


class GridMismatch(SprayGNNError):
    pass


class ZeroVelocity(SprayGNNError):
    pass


class DegenerateFit(SprayGNNError):
    pass


class ShapeMismatch(SprayGNNError):
    pass


class SegmentOutOfRange(SprayGNNError):
    pass


class NotScalar(SprayGNNError):
    pass


class DetachedTensor(SprayGNNError):
    pass


class EmptyCloud(SprayGNNError):
    pass


class EmptyDataset(SprayGNNError):
    pass


class HorizonExceedsLayers(SprayGNNError):
    pass


class MissingTruth(SprayGNNError):
    pass


class ConfigError(SprayGNNError):
    pass
