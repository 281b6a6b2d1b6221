"""Exception hierarchy shared by all voxelstrip modules."""


class VoxelstripError(Exception):
    """Base class for every error raised by this package."""


# volume I/O
class MalformedHeader(VoxelstripError):
    pass


class UnsupportedDatatype(VoxelstripError):
    pass


class DimensionError(VoxelstripError):
    pass


class DegenerateAffine(VoxelstripError):
    pass


class GridMismatch(VoxelstripError):
    pass


# numerics
class ZeroVariance(VoxelstripError):
    pass


class ShapeMismatch(VoxelstripError):
    pass


class NonScalarLoss(VoxelstripError):
    pass


# models and weights
class ConfigError(VoxelstripError):
    pass


class BadMagic(VoxelstripError):
    pass


class VersionUnsupported(VoxelstripError):
    pass


class ShapeHeaderMismatch(VoxelstripError):
    pass


class EmptyEnsemble(VoxelstripError):
    pass


# training / evaluation
class TooFewCases(VoxelstripError):
    pass


class EmptyMask(VoxelstripError):
    pass


class NoMatchingCases(VoxelstripError):
    pass


# statistics
class EmptyInput(VoxelstripError):
    pass


class AllZeroDifferences(VoxelstripError):
    pass


class MissingData(VoxelstripError):
    pass
