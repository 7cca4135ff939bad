"""
Point2Insert exception hierarchy
Every module raises one of these; the CLI maps them to exit statuses
"""

from typing import Any, Dict, Optional


class Point2InsertError(Exception):
    """Base error for every pipeline failure."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class DimensionError(Point2InsertError):
    """Invalid tensor dimensions (zero or negative extents, wrong rank)."""


class ShapeError(Point2InsertError):
    """Shapes that do not line up, or violate the latent divisibility law."""


class FormatError(Point2InsertError):
    """Malformed P2IT blob."""

    def __init__(self, message: str, offset: int = 0, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"{message} (at byte offset {offset})", details)
        self.offset = offset


class ValidationError(Point2InsertError):
    """Argument outside its documented domain."""


class SamplingError(Point2InsertError):
    """No eligible pixels to draw points from."""


class NumericalError(Point2InsertError):
    """Non-finite values during training or sampling."""

    def __init__(self, message: str, step: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message, details)
        self.step = step


class SceneSpecError(Point2InsertError):
    """Scene description that cannot be rendered as requested."""


class InpaintError(Point2InsertError):
    """Inpainting impossible (e.g. a frame fully masked)."""


class GenerationError(Point2InsertError):
    """Dataset synthesis could not admit any scene."""


class UsageError(Point2InsertError):
    """Bad command line, missing file, or config schema violation."""


class CheckpointError(Point2InsertError):
    """Checkpoint directory unreadable or inconsistent."""
