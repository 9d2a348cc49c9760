"""Evaluation measures for fitted hand/object poses."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyInput
from .geometry import TriMesh, kabsch_align
from .sdf import SdfGrid, query_sdf

RESAMPLE_MIN_POINTS = 1000


def vertex_mean_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over corresponding vertices."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise DimensionMismatch("vertex counts differ")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


def add_s(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean distance from each predicted point to its nearest GT point."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyInput("add_s needs nonempty point sets")
    d, _ = cKDTree(gt).query(pred)
    return float(d.mean())


def aligned_error(pred: np.ndarray, gt: np.ndarray,
                  mode: str = "procrustes") -> float:
    """Vertex mean distance after alignment.

    mode="procrustes": rotation + translation + scale (Kabsch/Umeyama);
    mode="scale_translation": closed-form scale and translation only.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise DimensionMismatch("vertex counts differ")
    if mode == "procrustes":
        aligned, _ = kabsch_align(pred, gt, with_scale=True)
    elif mode == "scale_translation":
        p0 = pred - pred.mean(axis=0)
        g0 = gt - gt.mean(axis=0)
        denom = (p0 ** 2).sum()
        s = float((p0 * g0).sum() / denom) if denom > 0 else 1.0
        aligned = s * p0 + gt.mean(axis=0)
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    return vertex_mean_distance(aligned, gt)


def f_score(pred: np.ndarray, gt: np.ndarray, threshold_m: float) -> float:
    """Harmonic mean of point-cloud precision and recall at a distance
    threshold; 0 when both are 0."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyInput("f_score needs nonempty point sets")
    dp, _ = cKDTree(gt).query(pred)
    dg, _ = cKDTree(pred).query(gt)
    precision = float((dp <= threshold_m).mean())
    recall = float((dg <= threshold_m).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def penetration_depth(hand_vertices: np.ndarray, object_sdf: SdfGrid) -> float:
    """Max over hand vertices of max(0, -SDF)."""
    vals, _ = query_sdf(object_sdf, np.asarray(hand_vertices, dtype=np.float64))
    return float(np.maximum(0.0, -vals).max(initial=0.0))


def contact_flag(hand_vertices: np.ndarray, object_sdf: SdfGrid) -> bool:
    """True when any hand vertex has nonpositive object SDF."""
    vals, _ = query_sdf(object_sdf, np.asarray(hand_vertices, dtype=np.float64))
    return bool((vals <= 0).any())


def contact_percentage(flags) -> float:
    """Fraction of frames flagged in contact."""
    flags = np.asarray(flags, dtype=bool)
    return float(flags.mean()) if flags.size else 0.0


def contact_accuracy(flags, gt_labels) -> float:
    """Agreement with ground-truth binary contact labels."""
    flags = np.asarray(flags, dtype=bool)
    gt = np.asarray(gt_labels, dtype=bool)
    if flags.shape != gt.shape:
        raise DimensionMismatch("frame counts differ")
    return float((flags == gt).mean()) if flags.size else 0.0


def sample_surface(mesh: TriMesh, n_points: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples; deterministic per seed."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fi = rng.choice(len(mesh.faces), size=n_points, p=areas / areas.sum())
    tri = mesh.vertices[mesh.faces[fi]]
    r1 = np.sqrt(rng.uniform(size=n_points))
    r2 = rng.uniform(size=n_points)
    a = 1 - r1
    b = r1 * (1 - r2)
    c = r1 * r2
    return a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]


def surface_points(mesh: TriMesh, min_points: int = RESAMPLE_MIN_POINTS,
                   seed: int = 0) -> np.ndarray:
    """Mesh vertices, resampled up to min_points when sparser."""
    if mesh.n_vertices >= min_points:
        return mesh.vertices
    return sample_surface(mesh, min_points, seed)
