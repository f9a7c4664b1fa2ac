"""Exception types shared across the pipeline stages."""


class EndomapError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(EndomapError):
    """Invalid or inconsistent configuration."""


class TooManyLevels(EndomapError):
    """Requested pyramid depth is infeasible for the image size."""


class NothingToAnchor(EndomapError):
    """Inpainting has no unmasked pixels to propagate from."""


class InsufficientMatches(EndomapError):
    """Fewer correspondences than the estimator requires."""


class DegenerateGeometry(EndomapError):
    """Point configuration is rank deficient (e.g. all collinear)."""


class EmptyOverlap(EndomapError):
    """No validly weighted pixels in the overlap of an image pair."""


class DisconnectedGraph(EndomapError):
    """Pair graph does not connect every frame to the anchor."""

    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"frames unreachable from anchor: {self.unreachable}")


class StageError(EndomapError):
    """Wraps an error with the pipeline stage it occurred in."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
