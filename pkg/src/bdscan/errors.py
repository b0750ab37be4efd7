"""Exception types shared across the package."""


class BdscanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BdscanError):
    """Invalid network/layer/config combination (shape mismatch, bad cut layer, ...)."""


class DataFormatError(BdscanError):
    """Malformed dataset file or record."""


class ModelFormatError(BdscanError):
    """Model/pattern file is corrupted or not in the expected container format."""


class ModelVersionError(ModelFormatError):
    """Model/pattern file was written by a newer, unsupported format version."""


class TrainingDivergedError(BdscanError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


class NoRemainingSamplesError(BdscanError):
    """Every source sample is already classified to the target: the restricted
    objective has an empty summation set and the caller should terminate."""


class DegenerateClassError(BdscanError):
    """The classifier is wrong on every clean sample of a class, so the
    correctly-classified-only objective is undefined for that class."""


class DegenerateStatisticsError(BdscanError):
    """Statistics are constant (or otherwise degenerate) and no model can be fit."""


class PairOptimizationError(BdscanError):
    """Perturbation search for one class pair failed (e.g. non-finite gradient)."""

    def __init__(self, source: int, target: int, message: str):
        self.source = source
        self.target = target
        super().__init__(f"pair ({source}->{target}): {message}")
