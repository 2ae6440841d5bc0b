"""Exception hierarchy for the petseg toolkit.

Three branches matter for exit-code mapping in the CLI: file/format
problems (``IoFailure``), precondition violations (``ValidationError``)
and segmentation-backend failures (``PredictorFailure``).
"""


class PetsegError(Exception):
    """Base class for all toolkit errors."""


class IoFailure(PetsegError):
    """File could not be read, decoded or written."""


class BadMagic(IoFailure):
    """Header magic is not the single-file NIfTI-1 tag 'n+1\\0'."""


class UnsupportedDatatype(IoFailure):
    """NIfTI datatype code outside the supported set {2, 4, 16, 64}."""

    def __init__(self, code: int):
        self.code = code
        super().__init__(f"unsupported NIfTI datatype code {code}")


class EndiannessUndetectable(IoFailure):
    """sizeof_hdr is not 348 under either byte order."""


class MalformedHeader(IoFailure):
    """Header fields violate the supported-subset invariants."""


class TruncatedData(IoFailure):
    """File holds fewer data bytes than the header shape demands."""


class DecompressFailure(IoFailure):
    """gzip container could not be decompressed."""


class ValidationError(PetsegError):
    """An argument violates a documented precondition."""


class ShapeMismatch(ValidationError):
    """Two volumes that must share a grid do not."""


class ShapeError(ValidationError):
    """Tensor shapes do not compose for the requested operation."""


class InvalidSpacing(ValidationError):
    """Voxel spacing must be strictly positive and finite."""


class InvalidWindow(ValidationError):
    """Intensity window must satisfy lo < hi."""


class LabelOverflow(ValidationError):
    """Label value exceeds the widest supported file datatype (int16)."""


class EmptySplit(ValidationError):
    """Training or validation split is empty."""


class DivergedLoss(ValidationError):
    """Validation loss became NaN during training."""


class TooFewSamples(ValidationError):
    """Fewer samples than cross-validation folds."""


class UnknownMaskName(ValidationError):
    """Organ mask name absent from the group table."""


class UnknownGroupId(ValidationError):
    """Group id absent from the group table."""


class HotspotOutOfBounds(ValidationError):
    """Phantom hotspot does not fit inside the volume."""


class PredictorFailure(PetsegError):
    """A segmentation backend failed or broke its output contract."""

    def __init__(self, name: str, reason: str = ""):
        self.name = name
        msg = f"predictor '{name}' failed"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class BudgetExceededWarning(UserWarning):
    """Inference wall time exceeded the configured budget (soft limit)."""
