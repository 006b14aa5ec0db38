"""Exception types shared across the package."""


class ClothCapError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ClothCapError, ValueError):
    """Bad argument values or malformed in-memory data."""


class TopologyError(ClothCapError, ValueError):
    """Mesh connectivity violates a required property (manifoldness etc.)."""


class BehindCameraError(ClothCapError, ValueError):
    """Points at or behind the camera plane cannot be projected."""

    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"points at or behind the camera plane: indices {self.indices[:16]}"
                         + ("..." if len(self.indices) > 16 else ""))


class ContainerError(ClothCapError, ValueError):
    """Model container on disk is malformed or inconsistent with its manifest."""


class ManifestError(ClothCapError, ValueError):
    """Sequence manifest is malformed or references bad measurement files."""


class AlignmentError(ClothCapError, ValueError):
    """Similarity alignment is degenerate (e.g. all points coincide)."""


class GenerationError(ClothCapError, ValueError):
    """Synthetic sequence generation produced an invalid configuration."""


class UnfittableSequenceError(ClothCapError, ValueError):
    """No frame carries enough confident keypoints to anchor a body fit."""


class StageError(ClothCapError, RuntimeError):
    """A pipeline stage failed; carries the stage tag."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
