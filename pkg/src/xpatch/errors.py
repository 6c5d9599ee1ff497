"""Exception types raised across the toolkit.

Soft conditions (degenerate denominators, empty subsets) are reported as
flags on result objects, not raised.
"""


class XPatchError(Exception):
    """Base class for toolkit errors."""


class ValidationError(XPatchError):
    """Input failed a structural check (CLI exit code 2)."""


class MissingInput(XPatchError):
    """A referenced file or stage input does not exist (CLI exit code 3)."""


class NumericalError(XPatchError):
    """Non-finite values or a broken numerical invariant (CLI exit code 4)."""


# checkpoint / container
class BadMagic(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    def __init__(self, name, expected, got):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name = name


class TruncatedPayload(ValidationError):
    pass


class VocabMaskInvalid(ValidationError):
    pass


class PairMismatch(ValidationError):
    pass


# runtime
class TokenOutOfRange(ValidationError):
    pass


class BoundaryOutOfRange(ValidationError):
    pass


class BoundaryMismatch(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


# analyses
class AlphaOutOfRange(ValidationError):
    pass


class WindowOutOfRange(ValidationError):
    pass


class WindowOverlapsLayerSet(ValidationError):
    pass


class RankExceedsFit(ValidationError):
    pass


class DumpMisaligned(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class EmptyInput(ValidationError):
    pass


class StageDependencyUnmet(MissingInput):
    pass


class NoResults(MissingInput):
    pass
