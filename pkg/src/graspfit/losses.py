"""The eight error terms and their weighted sum.

All terms are torch scalars, differentiable w.r.t. the pose parameters
that feed them. Reductions: the data-style terms (obj, v2d, smooth,
contact) are means so their weights are resolution- and vertex-count
independent; pca, scale, centroid and collision are plain sums.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import torch

from .errors import ConfigError, DimensionMismatch, InvalidScale
from .sdf import SdfGrid, query_values

# Local-contact thresholds: attraction band outside the surface, repulsion
# band (penetration cap) inside.
CONTACT_ATTRACT_M = 0.01
CONTACT_REPULSE_M = 0.02

TERM_NAMES = ("obj", "v2d", "pca", "scale", "smooth", "centroid", "local", "col")


@dataclass
class LossWeights:
    lambda_obj: float = 1.0
    lambda_v2d: float = 50.0
    lambda_pca: float = 0.004
    lambda_scale: float = 0.001
    lambda_smooth: float = 2000.0
    lambda_centroid: float = 1.0
    lambda_local: float = 1.0
    lambda_col: float = 0.001

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be nonnegative")

    def __getitem__(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")

    def replace(self, **kwargs) -> "LossWeights":
        d = self.to_dict()
        for k, v in kwargs.items():
            if k not in d:
                raise ConfigError(f"unknown weight {k!r}")
            d[k] = v
        return LossWeights(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown weight keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    terms: dict[str, float]
    total: float

    def as_row(self) -> list[float]:
        return [self.terms[t] for t in TERM_NAMES] + [self.total]


def loss_obj(rendered: torch.Tensor, target: torch.Tensor,
             hand_occlusion: torch.Tensor) -> torch.Tensor:
    """Occlusion-gated squared silhouette difference, mean over pixels."""
    if rendered.shape != target.shape or rendered.shape != hand_occlusion.shape:
        raise DimensionMismatch("mask shapes differ in loss_obj")
    diff = (1.0 - hand_occlusion) * (rendered - target)
    return diff.pow(2).mean()


def loss_v2d(projected: torch.Tensor, target: torch.Tensor,
             image_diag: float) -> torch.Tensor:
    """Mean squared projected-vertex offset, normalized by the squared
    image diagonal so one weight fits any resolution."""
    if projected.shape != target.shape:
        raise DimensionMismatch("vertex counts differ in loss_v2d")
    sq = (projected - target).pow(2).sum(-1)  # (..., V)
    return sq.mean() / image_diag**2


def loss_pca(theta: torch.Tensor) -> torch.Tensor:
    """Squared norm of the latent hand pose coefficients."""
    return torch.as_tensor(theta, dtype=torch.float64).pow(2).sum()


def loss_scale(scales: Sequence[torch.Tensor]) -> torch.Tensor:
    """Log-space deviation of every optimized scale from 1."""
    total = torch.zeros((), dtype=torch.float64)
    for s in scales:
        s = torch.as_tensor(s, dtype=torch.float64)
        if bool((s <= 0).any()):
            raise InvalidScale("scale must be positive")
        total = total + torch.log(s).pow(2).sum()
    return total


def loss_smooth(vertex_sequences: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean squared per-vertex displacement between consecutive frames,
    pooled over entities; 0 for single-frame clips."""
    sqs = []
    for seq in vertex_sequences:
        if seq.shape[0] >= 2:
            sqs.append((seq[1:] - seq[:-1]).pow(2).sum(-1).reshape(-1))
    if not sqs:
        return torch.zeros((), dtype=torch.float64)
    return torch.cat(sqs).mean()


def loss_centroid(hand_vertices: torch.Tensor, object_vertices: torch.Tensor,
                  boxes_overlap: bool) -> torch.Tensor:
    """Squared hand-object centroid distance, gated by 2D box overlap."""
    if not boxes_overlap:
        return torch.zeros((), dtype=torch.float64)
    return (hand_vertices.mean(0) - object_vertices.mean(0)).pow(2).sum()


def loss_collision(meshes: Sequence[tuple[torch.Tensor, SdfGrid]]) -> torch.Tensor:
    """Sum over ordered mesh pairs (k, l) of the penetration of l's
    vertices into k's SDF."""
    total = torch.zeros((), dtype=torch.float64)
    for k, (_, grid_k) in enumerate(meshes):
        for l, (verts_l, _) in enumerate(meshes):
            if k == l:
                continue
            total = total + torch.clamp(-query_values(grid_k, verts_l), min=0).sum()
    return total


def loss_contact(hand_vertices: torch.Tensor, object_vertices: torch.Tensor,
                 object_sdf: SdfGrid,
                 attract_m: float = CONTACT_ATTRACT_M,
                 repulse_m: float = CONTACT_REPULSE_M) -> torch.Tensor:
    """Attraction/repulsion toward the object surface.

    Hand vertices within attract_m outside the surface are pulled to their
    closest object vertex; penetrating vertices are pushed likewise, with
    penetrations deeper than repulse_m contributing a constant cap.
    Normalized by the hand vertex count.
    """
    sdf = query_values(object_sdf, hand_vertices)
    # Exact pairwise differences: torch.cdist's matrix-multiply path has
    # cancellation noise that breaks finite-difference gradient checks.
    d_sq = ((hand_vertices[:, None, :] - object_vertices[None, :, :]) ** 2) \
        .sum(dim=-1).min(dim=1).values
    attract = ((sdf > 0) & (sdf <= attract_m)).to(d_sq.dtype) * d_sq
    deep = sdf < -repulse_m
    repel_val = torch.where(deep, torch.full_like(d_sq, repulse_m**2), d_sq)
    repel = (sdf < 0).to(d_sq.dtype) * repel_val
    return (attract + repel).sum() / hand_vertices.shape[0]


def total_loss(terms: Mapping[str, torch.Tensor],
               weights: LossWeights) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum over TERM_NAMES; missing terms count as 0.

    Returns the differentiable total plus a detached per-term breakdown.
    """
    total = torch.zeros((), dtype=torch.float64)
    values = {}
    for name in TERM_NAMES:
        term = terms.get(name)
        if term is None:
            values[name] = 0.0
            continue
        term = torch.as_tensor(term, dtype=torch.float64)
        total = total + weights[name] * term
        values[name] = float(term.detach())
    return total, LossBreakdown(terms=values, total=float(total.detach()))
