"""Graph-based action spotting for broadcast soccer video, working entirely
from precomputed person detections, camera calibration, and optical flow."""

__version__ = "0.1.0"

from .errors import (
    ContractError,
    DependencyError,
    ParseError,
    PitchgraphError,
    ValidationError,
)

__all__ = [
    "ContractError",
    "DependencyError",
    "ParseError",
    "PitchgraphError",
    "ValidationError",
    "__version__",
]
