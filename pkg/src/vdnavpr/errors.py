"""Exception taxonomy shared across the library."""


class VdnaError(Exception):
    """Base class for all library errors."""


class CalibrationEmpty(VdnaError):
    """A calibration pass received no activation frames."""


class InvalidActivation(VdnaError):
    """An activation value is NaN (or infinite where finiteness is required)."""

    def __init__(self, message: str, neuron: int | None = None, frame_id: str | None = None):
        super().__init__(message)
        self.neuron = neuron
        self.frame_id = frame_id


class SpecMismatch(VdnaError):
    """Operands reference different histogram specs."""


class ShapeError(VdnaError):
    """Array shapes disagree with a declared contract."""


class FormatError(VdnaError):
    """A serialized artifact failed to parse."""


class SelectionError(VdnaError):
    """A neuron or layer selection does not exist in the bound spec."""


class GraphError(VdnaError):
    """Backward was requested without a recorded forward pass."""


class TrainingDataError(VdnaError):
    """The training set yields no valid triplet."""


class EmptyDatabase(VdnaError):
    """A query was issued against an empty descriptor database."""
