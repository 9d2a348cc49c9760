"""Voxel signed-distance fields of watertight meshes.

Grid nodes store exact signed Euclidean distance to the surface: magnitude
from point-to-triangle distance over all faces, sign from ray-crossing
parity (negative inside). Queries interpolate trilinearly and stay finite
and positive outside the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NotWatertight
from .geometry import TriMesh

DEFAULT_RESOLUTION = 32
# Cells of padding kept around the mesh AABB along its largest axis.
_PADDING_CELLS = 2

# Fixed "generic" ray direction for the parity test; avoids axis-aligned
# degeneracies on grid nodes.
_RAY_DIR = np.array([0.5354101966249685, 0.3141592653589793, 0.7853981633974483])
_RAY_DIR = _RAY_DIR / np.linalg.norm(_RAY_DIR)


def check_watertight(mesh: TriMesh) -> None:
    """Raise NotWatertight unless every edge is shared by exactly two
    consistently wound faces."""
    edges: dict[tuple[int, int], int] = {}
    for f in mesh.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(int(a), int(b))] = edges.get((int(a), int(b)), 0) + 1
    bad = []
    for (a, b), n in edges.items():
        if n != 1 or edges.get((b, a), 0) != 1:
            bad.append((a, b))
    if bad:
        raise NotWatertight(
            f"mesh is not watertight; {len(bad)} offending edges, "
            f"e.g. {bad[:5]}", edges=bad)


def _closest_point_sq(p: np.ndarray, a, b, c) -> np.ndarray:
    """Squared distance from points to triangles, elementwise over any
    broadcastable leading shape; the last axis holds xyz."""
    ab = b - a
    ac = c - a
    bc = c - b
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # Face region (default), then override with edge/vertex regions.
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    closest = a + ab * v[..., None] + ac * w[..., None]

    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    t_bc = np.where(m, (d4 - d3) / np.where(m, (d4 - d3) + (d5 - d6), 1.0), 0.0)
    closest = np.where(m[..., None], b + bc * t_bc[..., None], closest)

    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t_ac = np.where(m, d2 / np.where(m, d2 - d6, 1.0), 0.0)
    closest = np.where(m[..., None], a + ac * t_ac[..., None], closest)

    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t_ab = np.where(m, d1 / np.where(m, d1 - d3, 1.0), 0.0)
    closest = np.where(m[..., None], a + ab * t_ab[..., None], closest)

    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)

    return ((p - closest) ** 2).sum(-1)


def _parity_inside(points: np.ndarray, a, b, c) -> np.ndarray:
    """Inside test by ray-crossing parity along a fixed generic direction."""
    d = _RAY_DIR
    ab = b - a
    ac = c - a
    pvec = np.cross(d, ac)  # (F,3)
    det = (ab * pvec).sum(-1)  # (F,)
    valid = np.abs(det) > 1e-14
    inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    tvec = points[:, None, :] - a  # (P,F,3)
    u = (tvec * pvec).sum(-1) * inv
    qvec = np.cross(tvec, ab)
    v = (qvec * d).sum(-1) * inv
    t = (qvec * ac).sum(-1) * inv
    hits = valid & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    return (hits.sum(axis=1) % 2).astype(bool)


def _unsigned_distance(mesh: TriMesh, points: np.ndarray,
                       chunk: int = 512) -> np.ndarray:
    """Exact min distance to the surface, pruned by a nearest-vertex upper
    bound: a triangle can only beat it if its centroid ball intersects."""
    from scipy.spatial import cKDTree

    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    centroids = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroids[:, None, :], axis=2).max(axis=1)
    ub, _ = cKDTree(mesh.vertices).query(points)
    out = np.full(len(points), np.inf)
    c_sq = (centroids ** 2).sum(axis=1)
    for i in range(0, len(points), chunk):
        pts = points[i:i + chunk]
        # Squared centroid distances via one GEMM.
        cd2 = ((pts ** 2).sum(axis=1)[:, None] + c_sq[None, :]
               - 2.0 * pts @ centroids.T)
        np.maximum(cd2, 0.0, out=cd2)
        # A triangle can only beat the nearest-vertex bound if its
        # centroid ball reaches below it; the nearest vertex's own
        # triangles always qualify, so every point keeps candidates.
        reach = ub[i:i + chunk, None] + radius[None, :] + 1e-9
        pi, ti = np.nonzero(cd2 <= reach * reach)
        d2 = _closest_point_sq(pts[pi], a[ti], b[ti], c[ti])
        np.minimum.at(out, pi + i, d2)
    return np.sqrt(out)


def signed_distance_exact(mesh: TriMesh, points: np.ndarray,
                          chunk: int = 512) -> np.ndarray:
    """Exact signed distance (negative inside) at arbitrary points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    dist = _unsigned_distance(mesh, points, chunk)
    inside = np.empty(len(points), dtype=bool)
    for i in range(0, len(points), chunk):
        inside[i:i + chunk] = _parity_inside(points[i:i + chunk], a, b, c)
    return np.where(inside, -dist, dist)


def _grid_inside(mesh: TriMesh, origin: np.ndarray, cell: float, n: int) -> np.ndarray:
    """Ray-crossing parity for every grid node, scanline style: one +x ray is
    shared by each (j, k) node row. Rows are nudged by a tiny sub-cell offset
    so they never pass exactly through projected triangle edges."""
    xs = origin[0] + cell * np.arange(n)
    ys = origin[1] + cell * np.arange(n) + 0.7e-7 * cell
    zs = origin[2] + cell * np.arange(n) + 1.3e-7 * cell
    counts = np.zeros((n, n, n + 1), dtype=np.int64)

    tri = mesh.vertices[mesh.faces]
    for va, vb, vc in tri:
        area2 = (vb[1] - va[1]) * (vc[2] - va[2]) - (vb[2] - va[2]) * (vc[1] - va[1])
        if abs(area2) < 1e-300:  # ray parallel to the face plane
            continue
        ymin, ymax = min(va[1], vb[1], vc[1]), max(va[1], vb[1], vc[1])
        zmin, zmax = min(va[2], vb[2], vc[2]), max(va[2], vb[2], vc[2])
        j0, j1 = np.searchsorted(ys, (ymin, ymax))
        k0, k1 = np.searchsorted(zs, (zmin, zmax))
        yy, zz = np.meshgrid(ys[j0:j1], zs[k0:k1], indexing="ij")
        if yy.size == 0:
            continue

        def edge(p, q):
            return (q[1] - p[1]) * (zz - p[2]) - (q[2] - p[2]) * (yy - p[1])

        inside = ((edge(va, vb) * area2 >= 0)
                  & (edge(vb, vc) * area2 >= 0)
                  & (edge(vc, va) * area2 >= 0))
        if not inside.any():
            continue
        normal = np.cross(vb - va, vc - va)
        x_hit = va[0] - (normal[1] * (yy - va[1]) + normal[2] * (zz - va[2])) / normal[0]
        idx = np.searchsorted(xs, x_hit[inside])
        jj, kk = np.nonzero(inside)
        np.add.at(counts, (jj + j0, kk + k0, idx), 1)

    # hits_after[j,k,m] = crossings with x_hit beyond node m-1
    hits_after = counts[:, :, ::-1].cumsum(axis=2)[:, :, ::-1]
    return (hits_after[:, :, 1:] % 2 == 1).transpose(2, 0, 1)


@dataclass
class SdfGrid:
    resolution: int
    origin: np.ndarray      # (3,) world position of node (0,0,0)
    cell_size: float
    values: np.ndarray      # (N,N,N) signed distances, negative inside

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self._values_t = torch.from_numpy(self.values)
        # Node-wise central-difference gradient, used by query_sdf.
        self._node_grad = np.stack(
            np.gradient(self.values, self.cell_size), axis=-1)

    @property
    def extent(self) -> float:
        return (self.resolution - 1) * self.cell_size


def build_sdf_grid(mesh: TriMesh, resolution: int = DEFAULT_RESOLUTION) -> SdfGrid:
    """Sample the exact signed distance of a watertight mesh on a cubical grid.

    The grid is centered on the mesh AABB; its largest axis keeps
    _PADDING_CELLS cells of padding on each side, other axes get more.
    """
    check_watertight(mesh)
    lo, hi = mesh.aabb()
    max_extent = float((hi - lo).max())
    n_inner = resolution - 1 - 2 * _PADDING_CELLS
    if n_inner < 1:
        raise ValueError("resolution too small for the padding policy")
    cell = max_extent / n_inner if max_extent > 0 else 1e-3
    center = (lo + hi) / 2
    origin = center - (resolution - 1) / 2 * cell

    axes = [origin[d] + cell * np.arange(resolution) for d in range(3)]
    ii, jj, kk = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    dist = _unsigned_distance(mesh, nodes).reshape(resolution, resolution, resolution)
    inside = _grid_inside(mesh, origin, cell, resolution)
    vals = np.where(inside, -dist, dist)
    return SdfGrid(resolution=resolution, origin=origin, cell_size=cell,
                   values=vals)


def _trilinear(values_t: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of a (N,N,N) or (N,N,N,C) grid at continuous
    node coordinates u (...,3), assumed clamped to [0, N-1]."""
    n = values_t.shape[0]
    i0 = torch.clamp(u.detach().floor().long(), 0, n - 2)
    f = u - i0.to(u.dtype)
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    def corner(dx, dy, dz):
        return values_t[ix + dx, iy + dy, iz + dz]

    if values_t.dim() == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]
    c00 = corner(0, 0, 0) * (1 - fx) + corner(1, 0, 0) * fx
    c10 = corner(0, 1, 0) * (1 - fx) + corner(1, 1, 0) * fx
    c01 = corner(0, 0, 1) * (1 - fx) + corner(1, 0, 1) * fx
    c11 = corner(0, 1, 1) * (1 - fx) + corner(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def query_values(grid: SdfGrid, points: torch.Tensor) -> torch.Tensor:
    """Differentiable SDF lookup at world points (..., 3).

    Inside the grid: trilinear interpolation. Outside: value at the nearest
    boundary point plus the Euclidean distance to it, so far-away points
    always read as free space.
    """
    points = torch.as_tensor(points, dtype=torch.float64)
    origin = torch.from_numpy(grid.origin)
    u = (points - origin) / grid.cell_size
    uc = torch.clamp(u, 0.0, grid.resolution - 1 - 1e-9)
    base = _trilinear(grid._values_t, uc)
    delta = (u - uc) * grid.cell_size
    d2 = delta.pow(2).sum(-1)
    extra = torch.where(d2 > 0, torch.sqrt(d2.clamp_min(1e-300)),
                        torch.zeros_like(d2))
    return base + extra


def query_sdf(grid: SdfGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SDF values and spatial gradients at world points.

    Gradients are node central differences interpolated trilinearly
    (continuous within cells); outside the grid the boundary-distance
    direction is added.
    """
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64))
    vals = query_values(grid, pts).numpy()

    origin = torch.from_numpy(grid.origin)
    u = (pts - origin) / grid.cell_size
    uc = torch.clamp(u, 0.0, grid.resolution - 1 - 1e-9)
    grad = _trilinear(torch.from_numpy(grid._node_grad), uc).numpy()
    delta = ((u - uc) * grid.cell_size).numpy()
    nrm = np.linalg.norm(delta, axis=-1, keepdims=True)
    outside = nrm[..., 0] > 0
    if outside.any():
        grad = np.where(outside[..., None], grad + delta / np.where(nrm > 0, nrm, 1.0), grad)
    return vals, grad


def phi(grid: SdfGrid, points) -> torch.Tensor:
    """Nonnegative penetration depth max(0, -SDF) per point."""
    return torch.clamp(-query_values(grid, points), min=0.0)


class SdfCache:
    """Rebuilds a mesh's SDF grid only when its vertices have moved more
    than half a cell since the cached build."""

    def __init__(self, faces: np.ndarray, resolution: int = DEFAULT_RESOLUTION):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.resolution = resolution
        self._verts: np.ndarray | None = None
        self._grid: SdfGrid | None = None
        self.n_builds = 0

    def get(self, vertices: np.ndarray) -> SdfGrid:
        vertices = np.asarray(vertices, dtype=np.float64)
        if self._grid is not None:
            moved = np.abs(vertices - self._verts).max()
            if moved <= 0.5 * self._grid.cell_size:
                return self._grid
        self._grid = build_sdf_grid(TriMesh(vertices, self.faces), self.resolution)
        self._verts = vertices.copy()
        self.n_builds += 1
        return self._grid
