"""Exception hierarchy for the seqalign package."""


class SeqAlignError(Exception):
    """Base class for all seqalign errors."""


class ValidationError(SeqAlignError):
    """A domain object violates one of its invariants."""


class EmptyMaskError(SeqAlignError):
    """A foreground mask has no set cells."""


class StaticTrajectoryError(SeqAlignError):
    """A trajectory has zero total displacement; its shape descriptor is undefined."""


class InsufficientDataError(SeqAlignError):
    """Not enough (distinct) samples to fit the requested model."""


class InsufficientCorrespondencesError(SeqAlignError):
    """Fewer correspondences than the minimum the estimator needs."""


class DegenerateSampleError(SeqAlignError):
    """A point configuration is degenerate (e.g. collinear) for the estimator."""


class NoConsensusError(SeqAlignError):
    """RANSAC found no hypothesis reaching the minimum inlier count."""


class DegenerateControlPointsError(SeqAlignError):
    """Control points are collinear; the spline system is singular."""


class InsufficientPointsError(SeqAlignError):
    """Fewer points than the spline fit requires."""


class EmptyEdgeSetError(SeqAlignError):
    """Edge extraction pruned every candidate point."""


class AlignmentFailedError(SeqAlignError):
    """Every alignment candidate for a sequence pair had to be skipped."""


class NotEvaluableError(SeqAlignError):
    """No frame had enough co-visible landmarks to measure alignment error."""


class ManifestError(SeqAlignError):
    """A corpus manifest or data file failed to load or validate.

    ``code`` is a stable machine-readable identifier, e.g. ``missing_file``,
    ``bad_magic``, ``schema``, ``frame_range``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
