"""Exception types raised across the pipeline."""


class CisfaError(Exception):
    """Base class for all package errors."""


class DegenerateVolume(CisfaError):
    """Volume intensity variance too small to normalize; input is corrupt."""


class InvalidROI(CisfaError):
    """ROI box is empty or falls outside the volume."""


class TooFewVolumes(CisfaError):
    """Fewer volumes than requested folds."""


class ShapeError(CisfaError):
    """Tensor shape violates a network contract."""


class ShapeMismatch(CisfaError):
    """Prediction and ground-truth arrays disagree in shape."""


class TooManyPatches(CisfaError):
    """More patch positions requested than the feature map holds."""


class DegenerateBatch(CisfaError):
    """Contrastive batch too small to form positives and negatives."""


class InvalidMode(CisfaError):
    """Unknown combination mode or training mode."""


class LabelLeak(CisfaError):
    """A target-domain label reached the training path."""


class NonFiniteLoss(CisfaError):
    """A loss became NaN/Inf; training aborts rather than skipping steps."""


class DataError(CisfaError):
    """Dataset directory or container file is missing or malformed."""
