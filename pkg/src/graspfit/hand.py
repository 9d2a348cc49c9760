"""Differentiable parametric hand mesh.

A linear blendshape model: a latent pose vector theta of dimension K maps to
centered hand vertices as mean + sum_k theta_k * basis_k. Vertices are
centered on the middle-finger base joint. A sparse joint regressor maps
vertices to 21 joint positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import DimensionMismatch
from .geometry import TriMesh, rot6d_to_matrix
from .shapes import icosphere

N_JOINTS = 21
MIDDLE_BASE_JOINT = 9  # wrist=0, then 4 joints per finger; middle MCP = 1 + 4*2


@dataclass
class ParametricHandModel:
    mean_vertices: np.ndarray    # (V, 3) float64, centered on middle MCP
    pose_basis: np.ndarray       # (K, V, 3) float64
    faces: np.ndarray            # (F, 3) uint32
    joint_regressor: np.ndarray  # (J, V) float64, rows sum to 1
    side: str = "right"
    center_joint: int = MIDDLE_BASE_JOINT

    def __post_init__(self):
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=np.float64)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.uint32)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        rows = self.joint_regressor.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-8):
            raise DimensionMismatch("joint regressor rows must sum to 1")
        center = self.joint_regressor[self.center_joint] @ self.mean_vertices
        if np.linalg.norm(center) > 1e-6:
            raise DimensionMismatch(
                f"mean vertices not centered on joint {self.center_joint} "
                f"(offset {np.linalg.norm(center):.2e} m)")
        self._mean_t = torch.from_numpy(self.mean_vertices)
        self._basis_t = torch.from_numpy(self.pose_basis)
        self._regressor_t = torch.from_numpy(self.joint_regressor)

    @property
    def n_vertices(self) -> int:
        return self.mean_vertices.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.pose_basis.shape[0]

    def mesh(self, vertices: Optional[np.ndarray] = None) -> TriMesh:
        verts = self.mean_vertices if vertices is None else np.asarray(vertices)
        return TriMesh(verts, self.faces.astype(np.int64))

    def save(self, path) -> None:
        np.savez(
            path,
            mean_vertices=self.mean_vertices,
            pose_basis=self.pose_basis,
            faces=self.faces,
            joint_regressor=self.joint_regressor,
            side=np.str_(self.side),
            center_joint=np.int64(self.center_joint),
        )

    @classmethod
    def load(cls, path) -> "ParametricHandModel":
        data = np.load(path, allow_pickle=False)
        return cls(
            mean_vertices=data["mean_vertices"],
            pose_basis=data["pose_basis"],
            faces=data["faces"],
            joint_regressor=data["joint_regressor"],
            side=str(data["side"]),
            center_joint=int(data["center_joint"]),
        )


@dataclass
class BodyState:
    """Per-frame rigid (plus latent, for hands) pose of one entity."""

    rotation: np.ndarray                 # (6,) 6D rotation parameters
    translation: np.ndarray              # (3,) meters, camera frame
    scale: float = 1.0
    theta: Optional[np.ndarray] = None   # (K,), hands only

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(6)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)

    def to_dict(self) -> dict:
        d = {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }
        if self.theta is not None:
            d["theta"] = self.theta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BodyState":
        theta = np.array(d["theta"]) if "theta" in d else None
        return cls(rotation=np.array(d["rotation"]),
                   translation=np.array(d["translation"]),
                   scale=float(d.get("scale", 1.0)), theta=theta)


def hand_vertices(model: ParametricHandModel, theta: torch.Tensor) -> torch.Tensor:
    """Centered hand vertices for latent pose theta, shape (..., K) -> (..., V, 3)."""
    theta = torch.as_tensor(theta, dtype=torch.float64)
    if theta.shape[-1] != model.latent_dim:
        raise DimensionMismatch(
            f"theta has length {theta.shape[-1]}, model expects {model.latent_dim}")
    offset = torch.einsum("...k,kvc->...vc", theta, model._basis_t)
    return model._mean_t + offset


def hand_joints(model: ParametricHandModel, vertices: torch.Tensor) -> torch.Tensor:
    """Joint positions from vertices via the sparse regressor, (..., V, 3) -> (..., J, 3)."""
    vertices = torch.as_tensor(vertices, dtype=torch.float64)
    if vertices.shape[-2] != model.n_vertices:
        raise DimensionMismatch(
            f"got {vertices.shape[-2]} vertices, model has {model.n_vertices}")
    return torch.einsum("jv,...vc->...jc", model._regressor_t, vertices)


def pose_vertices(centered: torch.Tensor, rot_matrix: torch.Tensor,
                  translation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """World vertices scale * (R v) + D. All arguments broadcast over leading dims."""
    centered = torch.as_tensor(centered, dtype=torch.float64)
    rotated = torch.einsum("...ij,...vj->...vi", rot_matrix, centered)
    scale = torch.as_tensor(scale, dtype=torch.float64)
    translation = torch.as_tensor(translation, dtype=torch.float64)
    return scale[..., None, None] * rotated + translation[..., None, :]


def pose_entity(centered: torch.Tensor, state: BodyState) -> torch.Tensor:
    """Apply a BodyState to centered vertices."""
    rot = rot6d_to_matrix(torch.from_numpy(state.rotation))
    return pose_vertices(centered, rot, torch.from_numpy(state.translation),
                         torch.tensor(state.scale, dtype=torch.float64))


def _angles_to(dirs: np.ndarray, axis: np.ndarray) -> np.ndarray:
    cosang = np.clip(dirs @ axis, -1.0, 1.0)
    return np.arccos(cosang)


def build_test_hand(seed: int = 0, side: str = "right") -> ParametricHandModel:
    """Deterministic low-poly hand asset for tests and synthetic scenes.

    A subdivided icosphere (642 vertices) deformed into a paddle with five
    finger-like protrusions; 16 basis shapes are smooth seeded deformations
    concentrated on the finger regions.
    """
    rng = np.random.default_rng(seed)
    base = icosphere(1.0, 3)
    dirs = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)

    # Finger axes fan out around +z; thumb offset sideways.
    spread = np.linspace(-0.55, 0.55, 5)
    finger_axes = []
    for i, sx in enumerate(spread):
        ax = np.array([sx, 0.0, 1.0]) if i > 0 else np.array([-0.95, 0.0, 0.35])
        finger_axes.append(ax / np.linalg.norm(ax))
    finger_axes = np.array(finger_axes)

    radial = np.ones(len(dirs))
    sigma = 0.16
    finger_len = np.array([0.55, 0.75, 0.95, 1.05, 0.85])
    for ax, ln in zip(finger_axes, finger_len):
        ang = _angles_to(dirs, ax)
        radial += ln * np.exp(-0.5 * (ang / sigma) ** 2)

    verts = dirs * radial[:, None]
    verts *= np.array([0.042, 0.013, 0.048])  # palm half-extents, meters
    if side == "left":
        verts = verts * np.array([-1.0, 1.0, 1.0])
        faces = base.faces[:, ::-1].copy()
    else:
        faces = base.faces.copy()

    # Basis shapes: per-finger smooth displacements with random directions.
    k_latent = 16
    basis = np.zeros((k_latent, len(verts), 3))
    for k in range(k_latent):
        n_bumps = rng.integers(1, 4)
        which = rng.choice(5, size=n_bumps, replace=False)
        width = rng.uniform(0.12, 0.3)
        for i in which:
            ang = _angles_to(dirs, finger_axes[i])
            weight = np.exp(-0.5 * (ang / width) ** 2)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            amp = rng.uniform(0.004, 0.009)
            basis[k] += amp * weight[:, None] * direction
    # Keep basis shapes surface-tangent enough not to self-intersect at |theta|~1.

    # Joints: wrist + 4 per finger, regressed from the nearest mean vertices.
    joint_targets = [np.array([0.0, 0.0, -0.04])]
    for ax, ln in zip(finger_axes, finger_len):
        tip_r = np.array([0.042, 0.013, 0.048]) * (1.0 + ln)
        for frac in (0.45, 0.65, 0.85, 1.0):
            joint_targets.append(ax * tip_r * frac)
    regressor = np.zeros((N_JOINTS, len(verts)))
    for j, target in enumerate(joint_targets):
        d = np.linalg.norm(verts - target, axis=1)
        nearest = np.argsort(d)[:4]
        w = 1.0 / (d[nearest] + 1e-6)
        regressor[j, nearest] = w / w.sum()

    center = regressor[MIDDLE_BASE_JOINT] @ verts
    verts = verts - center

    return ParametricHandModel(
        mean_vertices=verts,
        pose_basis=basis,
        faces=faces.astype(np.uint32),
        joint_regressor=regressor,
        side=side,
    )
