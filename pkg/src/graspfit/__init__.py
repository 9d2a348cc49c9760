"""graspfit: joint hand + rigid-object pose fitting from tracked video
evidence (2D detections, segmentation masks, per-frame hand estimates)."""

from .errors import (
    AlignmentUnderdetermined,
    BehindCamera,
    ConfigError,
    DegenerateEvidence,
    DegenerateRotation,
    DimensionMismatch,
    DivergedFit,
    EmptyInput,
    GraspFitError,
    InvalidScale,
    MissingEvidence,
    NotWatertight,
)
from .fitting import (
    ClipState,
    EntityTrack,
    FitConfig,
    FitResult,
    SceneAssets,
    fit_joint,
    init_clip_state,
)
from .geometry import CameraIntrinsics, SimilarityTransform, TriMesh, kabsch_align
from .hand import BodyState, ParametricHandModel, build_test_hand
from .losses import LossBreakdown, LossWeights
from .masks import MaskImage
from .render import RenderConfig, hard_silhouette, mask_iou, soft_silhouette
from .sdf import SdfCache, SdfGrid, build_sdf_grid
from .tracking import Detection, EvidenceClip, FrameEvidence, Track, kalman_track

__version__ = "0.1.0"

__all__ = [
    "AlignmentUnderdetermined", "BehindCamera", "BodyState", "CameraIntrinsics",
    "ClipState", "ConfigError", "DegenerateEvidence", "DegenerateRotation",
    "Detection", "DimensionMismatch", "DivergedFit", "EmptyInput", "EntityTrack",
    "EvidenceClip", "FitConfig", "FitResult", "FrameEvidence", "GraspFitError",
    "InvalidScale", "LossBreakdown", "LossWeights", "MaskImage", "MissingEvidence",
    "NotWatertight", "ParametricHandModel", "RenderConfig", "SceneAssets",
    "SdfCache", "SdfGrid", "SimilarityTransform", "Track", "TriMesh",
    "build_sdf_grid", "build_test_hand", "fit_joint", "hard_silhouette",
    "init_clip_state", "kabsch_align", "kalman_track", "mask_iou",
    "soft_silhouette",
]
