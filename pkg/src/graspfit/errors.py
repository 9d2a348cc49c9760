"""Exception types shared across the package."""


class GraspFitError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(GraspFitError):
    """6D rotation input whose two direction vectors are parallel or zero."""


class BehindCamera(GraspFitError):
    """A 3D point with z <= 0 reached a projection or rasterization step."""


class AlignmentUnderdetermined(GraspFitError):
    """Too few or degenerate points for a rigid/similarity alignment."""


class DimensionMismatch(GraspFitError):
    """Array shapes disagree with what the operation requires."""


class NotWatertight(GraspFitError):
    """Mesh has boundary or non-manifold edges; lists offenders."""

    def __init__(self, message, edges=None):
        super().__init__(message)
        self.edges = list(edges) if edges is not None else []


class MissingEvidence(GraspFitError):
    """Required per-frame evidence (mask, hand init, ...) is absent."""


class DegenerateEvidence(GraspFitError):
    """Evidence present but unusable (zero-span vertices, zero-area box)."""


class InvalidScale(GraspFitError):
    """A scale parameter is not strictly positive."""


class EmptyInput(GraspFitError):
    """An operation that needs a nonempty point set received an empty one."""


class DivergedFit(GraspFitError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.term = term
        self.step = step


class ConfigError(GraspFitError):
    """Bad or unknown configuration keys/values."""
