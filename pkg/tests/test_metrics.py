import numpy as np
import pytest

from graspfit.errors import DimensionMismatch, EmptyInput
from graspfit.geometry import SimilarityTransform
from graspfit.metrics import (
    add_s,
    aligned_error,
    contact_accuracy,
    contact_flag,
    contact_percentage,
    f_score,
    penetration_depth,
    sample_surface,
    surface_points,
    vertex_mean_distance,
)
from graspfit.sdf import build_sdf_grid
from graspfit.shapes import icosphere


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


class TestVertexMeanDistance:
    def test_identical(self, rng):
        pts = rng.standard_normal((50, 3))
        assert vertex_mean_distance(pts, pts) == 0.0

    def test_uniform_offset(self, rng):
        pts = rng.standard_normal((50, 3))
        assert abs(vertex_mean_distance(pts + [0.01, 0, 0], pts) - 0.01) < 1e-12

    def test_half_offset(self, rng):
        pts = rng.standard_normal((50, 3))
        moved = pts.copy()
        moved[:25, 0] += 0.02
        assert abs(vertex_mean_distance(moved, pts) - 0.01) < 1e-12

    def test_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            vertex_mean_distance(np.zeros((3, 3)), np.zeros((4, 3)))


class TestAddS:
    def test_identical(self, rng):
        pts = rng.standard_normal((50, 3))
        assert add_s(pts, pts) == 0.0

    def test_rotated_dense_sphere(self, rng):
        sphere = icosphere(0.05, 3)
        pts = sphere.vertices
        rotated = pts @ _random_rotation(rng).T
        # Nearest-neighbor spacing of the sampling bounds the metric.
        from scipy.spatial import cKDTree
        d, _ = cKDTree(pts).query(pts, k=2)
        max_spacing = d[:, 1].max()
        assert add_s(rotated, pts) <= max_spacing

    def test_empty(self):
        with pytest.raises(EmptyInput):
            add_s(np.zeros((0, 3)), np.zeros((5, 3)))

    def test_bounded_by_vertex_mean_distance(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = rng.integers(2, 30)
            a = rng.standard_normal((n, 3))
            b = rng.standard_normal((n, 3))
            assert add_s(a, b) <= vertex_mean_distance(a, b) + 1e-12


class TestAlignedError:
    def test_procrustes_removes_similarity(self, rng):
        pts = rng.standard_normal((40, 3))
        tf = SimilarityTransform(rotation=_random_rotation(rng),
                                 translation=rng.standard_normal(3),
                                 scale=1.7)
        assert aligned_error(tf.apply(pts), pts, mode="procrustes") < 1e-9

    def test_scale_translation_keeps_rotation(self, rng):
        pts = rng.standard_normal((40, 3))
        rotated = pts @ _random_rotation(rng).T
        assert aligned_error(rotated, pts, mode="scale_translation") > 1e-3

    def test_alignment_never_hurts(self, rng):
        pts = rng.standard_normal((40, 3))
        noisy = pts + rng.normal(scale=0.05, size=pts.shape)
        assert aligned_error(noisy, pts, mode="procrustes") <= \
            vertex_mean_distance(noisy, pts) + 1e-12

    def test_unknown_mode(self, rng):
        pts = rng.standard_normal((10, 3))
        with pytest.raises(ValueError):
            aligned_error(pts, pts, mode="rigid")


class TestFScore:
    def _offset_grid(self):
        # 5x5x5 grid with 10 mm uniform offset: every mutual nearest distance
        # is exactly 10 mm.
        g = np.stack(np.meshgrid(*[np.arange(5) * 0.1] * 3,
                                 indexing="ij"), axis=-1).reshape(-1, 3)
        return g, g + np.array([0.010, 0.0, 0.0])

    def test_identical(self, rng):
        pts = rng.standard_normal((30, 3))
        assert f_score(pts, pts, 0.001) == 1.0

    def test_offset_grid_5mm(self):
        a, b = self._offset_grid()
        assert f_score(b, a, 0.005) == 0.0

    def test_offset_grid_15mm(self):
        a, b = self._offset_grid()
        assert f_score(b, a, 0.015) == 1.0

    def test_monotone_in_threshold(self, rng):
        a = rng.standard_normal((40, 3))
        b = rng.standard_normal((40, 3))
        scores = [f_score(a, b, t) for t in (0.1, 0.5, 1.0, 2.0, 5.0)]
        assert all(s1 <= s2 for s1, s2 in zip(scores, scores[1:]))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            f_score(np.zeros((0, 3)), np.zeros((5, 3)), 0.01)


class TestPenetrationAndContact:
    @pytest.fixture(scope="class")
    def sphere(self):
        mesh = icosphere(0.05, 3)
        return mesh, build_sdf_grid(mesh)

    def test_disjoint_zero(self, sphere):
        _, grid = sphere
        hand = np.array([[0.2, 0, 0], [0, 0.3, 0]])
        assert penetration_depth(hand, grid) == 0.0
        assert contact_flag(hand, grid) is False

    def test_depth_7mm(self, sphere):
        _, grid = sphere
        hand = np.array([[0.043, 0.0, 0.0], [0.2, 0, 0]])  # 7 mm inside
        assert abs(penetration_depth(hand, grid) - 0.007) <= 0.5 * grid.cell_size

    def test_surface_vertex(self, sphere):
        _, grid = sphere
        hand = np.array([[0.05, 0.0, 0.0]])
        assert penetration_depth(hand, grid) <= 0.5 * grid.cell_size

    def test_grasp_flag(self, sphere):
        _, grid = sphere
        assert contact_flag(np.array([[0.0, 0.0, 0.0]]), grid) is True

    def test_contact_percentage(self):
        assert contact_percentage([True, False, False, True, False,
                                   False, False, True, False, False]) == 0.3

    def test_contact_accuracy(self):
        flags = [True, False, True]
        assert contact_accuracy(flags, [True, True, True]) == pytest.approx(2 / 3)
        with pytest.raises(DimensionMismatch):
            contact_accuracy(flags, [True])

    def test_penetration_contact_consistency(self, sphere, rng):
        _, grid = sphere
        from graspfit.sdf import query_sdf
        pts = rng.uniform(-0.08, 0.08, size=(50, 3))
        vals, _ = query_sdf(grid, pts)
        strict_interior = bool((vals < 0).any())
        assert (penetration_depth(pts, grid) > 0) == strict_interior


class TestSurfaceSampling:
    def test_deterministic(self, sphere_mesh):
        a = sample_surface(sphere_mesh, 500, seed=3)
        b = sample_surface(sphere_mesh, 500, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_samples_on_surface(self, sphere_mesh):
        pts = sample_surface(sphere_mesh, 1000, seed=0)
        r = np.linalg.norm(pts, axis=1)
        # Icosphere faces are chords: samples lie slightly inside radius.
        assert (r <= 0.05 + 1e-12).all() and (r > 0.045).all()

    def test_surface_points_passthrough(self, sphere_mesh):
        pts = surface_points(sphere_mesh, min_points=100)
        np.testing.assert_array_equal(pts, sphere_mesh.vertices)

    def test_surface_points_resamples(self, cube_mesh):
        pts = surface_points(cube_mesh, min_points=1000)
        assert len(pts) == 1000
