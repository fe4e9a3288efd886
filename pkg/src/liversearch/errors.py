"""Exception types shared across the toolkit.

Plain invalid arguments (bad window bounds, k < 1, ...) raise ValueError;
the classes below mark conditions callers are expected to branch on.
"""


class LiverSearchError(Exception):
    """Base class for toolkit-specific errors."""


class FormatError(LiverSearchError):
    """A file or payload failed to parse.

    Carries ``offset``, the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class MaskAlignmentError(LiverSearchError):
    """Segmentation mask shape does not match the image it annotates."""


class InsufficientSlicesError(LiverSearchError):
    """A volume cannot supply the requested number of slices in a stratum.

    Callers treat this as a volume-skipped signal: log and exclude the volume.
    """


class DegenerateVectorError(LiverSearchError):
    """A vector with (near-)zero norm reached a cosine operation."""


class TrainingDivergedError(LiverSearchError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StoreConsistencyError(LiverSearchError):
    """Embedding store and checkpoint fingerprints disagree."""


class DuplicateSliceError(LiverSearchError):
    """A slice id was embedded into the same store twice."""


class EmptyCandidateError(LiverSearchError):
    """A query's candidate set is empty after filtering/exclusion."""


class EmptyMaskError(LiverSearchError):
    """Relevance ranking is undefined for an all-zero segmentation mask."""
