"""Error types raised by facecloak services and commands"""
from typing import Any, Dict, Optional


class FaceCloakError(Exception):
    """Base class for every expected failure in facecloak"""


class ConfigurationError(FaceCloakError, ValueError):
    """Invalid configuration, precondition or parameter"""


class ShapeError(FaceCloakError, ValueError):
    """Array dimensions do not match what the operation expects"""


class NoFaceError(FaceCloakError):
    """The UV provider found no face surface for an image"""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        super().__init__(message)
        self.frame_index = frame_index


class NumericError(FaceCloakError, ArithmeticError):
    """A numerical decomposition failed"""


class NonFiniteLossError(NumericError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, iteration: int, terms: Dict[str, float]):
        rendered = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"Non-finite loss at iteration {iteration}: {rendered}")
        self.iteration = iteration
        self.terms = terms


class TrainingFailureError(FaceCloakError):
    """FR training finished without reaching the accuracy floor"""

    def __init__(self, model_id: str, accuracy: float, floor: float):
        super().__init__(
            f"Model {model_id} reached verification accuracy {accuracy:.4f}, below floor {floor:.4f}"
        )
        self.model_id = model_id
        self.accuracy = accuracy
        self.floor = floor


class ConsistencyError(FaceCloakError):
    """Objects built with different FR models were mixed"""


class BoundsError(FaceCloakError, IndexError):
    """Requested rank or index is outside the database"""


class UndefinedMetricError(FaceCloakError):
    """The metric is undefined for the given inputs"""


class TransferError(FaceCloakError):
    """A transfer study failed for a held-out model"""

    def __init__(self, model_id: str, cause: Any):
        super().__init__(f"Transfer study failed for held-out model {model_id}: {cause}")
        self.model_id = model_id


class ArtifactError(FaceCloakError):
    """Problem with an on-disk artifact"""


class MissingArtifactError(ArtifactError):
    """A required input artifact does not exist"""


class ArtifactFormatError(ArtifactError):
    """An artifact has an unknown magic header or format version"""


class OutputExistsError(ArtifactError):
    """Refusing to write into an occupied output directory"""
