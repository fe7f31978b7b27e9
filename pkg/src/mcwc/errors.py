"""Exception hierarchy shared across the codec."""


class McwcError(Exception):
    """Base class for all codec errors."""


class MissingFile(McwcError):
    pass


class IoFailure(McwcError):
    pass


class ManifestParse(McwcError):
    pass


class ShapeMismatch(McwcError):
    pass


class NonFiniteValue(McwcError):
    pass


class InvalidCheckpoint(McwcError):
    pass


class MissingTensor(McwcError):
    pass


class AxisOutOfRange(McwcError):
    pass


class BlockCountMismatch(McwcError):
    pass


class IncompleteBlockSet(McwcError):
    pass


class LengthMismatch(McwcError):
    pass


class NotBijection(McwcError):
    pass


class DigitOutOfRange(McwcError):
    pass


class DimensionMismatch(McwcError):
    pass


class NonSquare(McwcError):
    pass


class NonFinite(McwcError):
    pass


class EmptyGroup(McwcError):
    pass


class CodeOutOfRange(McwcError):
    pass


class OutOfSupport(McwcError):
    pass


class MissingPrediction(McwcError):
    pass


class CorruptStream(McwcError):
    pass


class CdfInvalid(McwcError):
    pass


class NonFiniteLoss(McwcError):
    pass


class UnknownType(McwcError):
    pass


class LayerIndexOutOfRange(McwcError):
    pass


class BadMagic(McwcError):
    pass


class UnsupportedVersion(McwcError):
    pass


class RecordCountMismatch(McwcError):
    pass


class ZeroVariance(McwcError):
    pass


class ZeroEnergy(McwcError):
    pass


class DimMismatch(McwcError):
    pass


class NoBreakEven(McwcError):
    pass
