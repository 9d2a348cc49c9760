"""Silhouette rasterization.

soft_silhouette is the differentiable path used by the object mask loss:
per pixel, each face contributes an occupancy probability
sigmoid(d / sigma) where d is the signed pixel distance to the projected
triangle boundary (positive inside), and faces combine as a probabilistic
union. hard_silhouette is a plain point-in-triangle rasterizer with the
top-left fill rule, used for candidate selection and synthetic ground
truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BehindCamera, DimensionMismatch
from .geometry import CameraIntrinsics, project
from .masks import MaskImage

_FACE_CHUNK = 128


@dataclass
class RenderConfig:
    resolution: tuple[int, int]       # (width, height)
    sigma: float = 1.0                # softness length, pixels
    backface_culling: bool = False

    def __post_init__(self):
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError("resolution must be at least 1x1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def _pixel_centers_offset(x0: int, y0: int, width: int, height: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(y0, y0 + height, dtype=torch.float64) + 0.5,
        torch.arange(x0, x0 + width, dtype=torch.float64) + 0.5,
        indexing="ij")
    return torch.stack([xs, ys], dim=-1).reshape(-1, 2)  # (P, 2)


def _point_segment_dist(x: torch.Tensor, p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Distance from pixels x (P,1,2) to segments p-q (1,F,2), -> (P,F)."""
    e = q - p
    len2 = (e * e).sum(-1).clamp_min(1e-30)
    t = (((x - p) * e).sum(-1) / len2).clamp(0.0, 1.0)
    closest = p + t[..., None] * e
    return torch.linalg.norm(x - closest, dim=-1)


# Pixels farther than this many sigma from the projected mesh contribute
# occupancy below sigmoid(-16) ~ 1e-7 and are skipped (rendered as exact 0).
_CROP_MARGIN_SIGMA = 16.0


def soft_silhouette(vertices: torch.Tensor, faces: np.ndarray,
                    cam: CameraIntrinsics, config: RenderConfig) -> torch.Tensor:
    """Differentiable soft mask (H, W) of a mesh; gradients flow to vertices.

    Raises BehindCamera if any vertex has z <= 0. Empty face list renders
    an all-zero mask. Pixels far outside the projected bounding box are
    exactly 0 (their true occupancy is below 1e-7).
    """
    w, h = config.resolution
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        return torch.zeros((h, w), dtype=torch.float64)
    pts2d = project(cam, vertices)  # (V, 2); raises BehindCamera

    margin = _CROP_MARGIN_SIGMA * config.sigma + 1.0
    with torch.no_grad():
        lo = pts2d.min(dim=0).values - margin
        hi = pts2d.max(dim=0).values + margin
    x0 = min(max(int(np.floor(float(lo[0]) - 0.5)), 0), w)
    x1 = min(max(int(np.ceil(float(hi[0]) + 0.5)) + 1, 0), w)
    y0 = min(max(int(np.floor(float(lo[1]) - 0.5)), 0), h)
    y1 = min(max(int(np.ceil(float(hi[1]) + 0.5)) + 1, 0), h)
    cw, ch = x1 - x0, y1 - y0
    if cw <= 0 or ch <= 0:
        return torch.zeros((h, w), dtype=torch.float64)

    pix = _pixel_centers_offset(x0, y0, cw, ch)[:, None, :]  # (P, 1, 2)
    faces_t = torch.from_numpy(faces)

    log_miss = torch.zeros(ch * cw, dtype=torch.float64)
    for f0 in range(0, len(faces), _FACE_CHUNK):
        fc = faces_t[f0:f0 + _FACE_CHUNK]
        v0 = pts2d[fc[:, 0]][None]  # (1, F, 2)
        v1 = pts2d[fc[:, 1]][None]
        v2 = pts2d[fc[:, 2]][None]

        def cross2(a, b):
            return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

        area2 = cross2(v1 - v0, v2 - v0)  # (1, F)
        orient = torch.sign(area2)
        e0 = cross2(v1 - v0, pix - v0) * orient
        e1 = cross2(v2 - v1, pix - v1) * orient
        e2 = cross2(v0 - v2, pix - v2) * orient
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0) & (orient != 0)

        d = torch.minimum(
            _point_segment_dist(pix, v0, v1),
            torch.minimum(_point_segment_dist(pix, v1, v2),
                          _point_segment_dist(pix, v2, v0)))
        signed = torch.where(inside, d, -d)
        p_face = torch.sigmoid(signed / config.sigma).clamp(max=1.0 - 1e-12)
        log_miss = log_miss + torch.log1p(-p_face).sum(dim=1)

    occupancy = torch.zeros((h, w), dtype=torch.float64)
    occupancy[y0:y1, x0:x1] = (1.0 - torch.exp(log_miss)).reshape(ch, cw)
    return occupancy


def hard_silhouette(vertices, faces: np.ndarray, cam: CameraIntrinsics,
                    resolution: tuple[int, int]) -> MaskImage:
    """Binary mask: pixel set iff its center lies inside a projected triangle.

    Point-in-triangle by edge-function sign tests with the top-left fill
    rule, so shared edges never double-fill or leave gaps.
    """
    w, h = resolution
    verts = np.asarray(
        vertices.detach().numpy() if isinstance(vertices, torch.Tensor) else vertices,
        dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    out = np.zeros((h, w), dtype=bool)
    if faces.size == 0 or len(verts) == 0:
        return MaskImage(out.astype(np.float64))
    if (verts[:, 2] <= 0).any():
        raise BehindCamera("vertex with z <= 0 in hard rasterization")
    u = verts[:, 0] / verts[:, 2] * cam.fx + cam.cx
    v = verts[:, 1] / verts[:, 2] * cam.fy + cam.cy
    p2 = np.stack([u, v], axis=1)

    for f in faces:
        tri = p2[f]
        e1 = tri[1] - tri[0]
        e2 = tri[2] - tri[0]
        area2 = e1[0] * e2[1] - e1[1] * e2[0]
        if area2 == 0:
            continue
        if area2 < 0:
            tri = tri[::-1]
        x0 = max(int(np.floor(tri[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(tri[:, 0].max() - 0.5)) + 1, w)
        y0 = max(int(np.floor(tri[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(tri[:, 1].max() - 0.5)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        covered = np.ones_like(gx, dtype=bool)
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            e = b - a
            val = e[0] * (gy - a[1]) - e[1] * (gx - a[0])
            top_left = (e[1] == 0 and e[0] > 0) or e[1] < 0
            covered &= (val > 0) | ((val == 0) & top_left)
        out[y0:y1, x0:x1] |= covered
    return MaskImage(out.astype(np.float64))


def mask_iou(a: MaskImage, b: MaskImage) -> float:
    """Intersection over union of masks thresholded at 0.5; 0 on empty union."""
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionMismatch("mask sizes differ")
    ba = a.binary()
    bb = b.binary()
    union = np.logical_or(ba, bb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(ba, bb).sum() / union)
