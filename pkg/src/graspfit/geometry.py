"""Camera model, rotation parameterization, mesh container and rigid alignment.

Conventions used everywhere in the package:
  - 3D quantities are in meters, camera frame (+z in front of the camera).
  - 2D quantities are continuous pixel coordinates; pixel (i, j) has its
    center at (j + 0.5, i + 0.5).
  - Rotations are parameterized by the 6D continuous representation (the
    first two, unnormalized, columns of the rotation matrix).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    AlignmentUnderdetermined,
    BehindCamera,
    DegenerateRotation,
    DimensionMismatch,
)

_EPS = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera rendered at 1/factor resolution."""
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]))


def rot6d_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Decode 6D rotation parameters to rotation matrices.

    Gram-Schmidt on the two 3-vectors; third column is their cross product.
    Differentiable. Accepts shape (..., 6), returns (..., 3, 3).
    """
    r = torch.as_tensor(r, dtype=torch.float64)
    if r.shape[-1] != 6:
        raise DimensionMismatch(f"expected (..., 6), got {tuple(r.shape)}")
    a = r[..., :3]
    b = r[..., 3:]
    na = torch.linalg.norm(a, dim=-1, keepdim=True)
    if bool((na < 1e-8).any()):
        raise DegenerateRotation("first 3-vector has (near-)zero norm")
    x = a / na
    b_orth = b - (x * b).sum(-1, keepdim=True) * x
    nb = torch.linalg.norm(b_orth, dim=-1, keepdim=True)
    if bool((nb < 1e-8).any()):
        raise DegenerateRotation("3-vectors are (near-)parallel")
    y = b_orth / nb
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def matrix_to_rot6d(m: torch.Tensor) -> torch.Tensor:
    """First two columns of rotation matrices, flattened to (..., 6)."""
    m = torch.as_tensor(m, dtype=torch.float64)
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def project(cam: CameraIntrinsics, points: torch.Tensor) -> torch.Tensor:
    """Pinhole projection of (..., 3) camera-frame points to pixel coords.

    Raises BehindCamera if any point has z <= 0.
    """
    points = torch.as_tensor(points, dtype=torch.float64)
    z = points[..., 2]
    if bool((z <= 0).any()):
        raise BehindCamera("point(s) with z <= 0 cannot be projected")
    u = cam.fx * points[..., 0] / z + cam.cx
    v = cam.fy * points[..., 1] / z + cam.cy
    return torch.stack([u, v], dim=-1)


@dataclass
class TriMesh:
    """Triangle mesh, vertices in meters."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DimensionMismatch("face index out of range")
        if self.faces.size:
            tri = self.vertices[self.faces]
            areas = 0.5 * np.linalg.norm(
                np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            if (areas < 1e-14).any():
                bad = np.nonzero(areas < 1e-14)[0]
                raise DimensionMismatch(f"degenerate (zero-area) faces: {bad.tolist()[:10]}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @classmethod
    def load_obj(cls, path) -> "TriMesh":
        verts, faces = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    if len(idx) != 3:
                        raise DimensionMismatch("only triangular faces supported")
                    faces.append(idx)
        return cls(np.array(verts), np.array(faces))

    def save_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in self.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def kabsch_align(source: np.ndarray, target: np.ndarray, with_scale: bool = False):
    """Least-squares similarity alignment of corresponded point sets.

    Returns (aligned_source, transform) where transform maps source onto
    target minimizing the sum of squared distances (Kabsch / Umeyama).
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape != target.shape:
        raise DimensionMismatch("point sets must have equal shapes")
    if len(source) < 3:
        raise AlignmentUnderdetermined("need at least 3 points")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    src = source - mu_s
    tgt = target - mu_t
    cov = src.T @ tgt / len(source)
    u, sv, vt = np.linalg.svd(cov)
    if sv[1] < 1e-12 * max(sv[0], 1e-300) or sv[0] < 1e-15:
        raise AlignmentUnderdetermined("points are (near-)collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    s3 = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(s3) @ u.T
    if with_scale:
        var_s = (src ** 2).sum() / len(source)
        scale = float((sv * s3).sum() / var_s)
    else:
        scale = 1.0
    trans = mu_t - scale * rot @ mu_s
    tf = SimilarityTransform(rotation=rot, translation=trans, scale=scale)
    return tf.apply(source), tf
