import numpy as np
import pytest
import torch

from graspfit.errors import ConfigError, DegenerateEvidence
from graspfit.fitting import (
    ClipState,
    EntityTrack,
    FitConfig,
    SceneAssets,
    fit_joint,
    init_hand,
    init_object_translation,
    pose_entity_np,
    refine_object_silhouette,
    sample_rotations,
)
from graspfit.geometry import CameraIntrinsics, rot6d_to_matrix
from graspfit.hand import BodyState, hand_vertices
from graspfit.losses import TERM_NAMES, LossWeights
from graspfit.masks import MaskImage
from graspfit.render import hard_silhouette
from graspfit.shapes import icosphere
from graspfit.synth import generate_clip, load_scene, make_scene_spec, perturb_state
from graspfit.tracking import FrameEvidence, HandInit


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    spec = make_scene_spec(n_frames=2, seed=4)
    out = tmp_path_factory.mktemp("tiny") / "scene"
    generate_clip(spec, out)
    return load_scene(out)


class TestFitConfig:
    def test_defaults(self):
        c = FitConfig()
        assert c.steps_per_stage == 200
        assert c.lr_pose == 0.1 and c.lr_translation_scale == 0.01
        assert c.n_rotation_candidates == 50
        assert c.adam_betas == (0.9, 0.999) and c.adam_eps == 1e-8

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            FitConfig.from_dict({"step_count": 10})

    def test_dict_roundtrip(self):
        c = FitConfig(steps_per_stage=7, weights=LossWeights(lambda_col=0.5))
        back = FitConfig.from_dict(c.to_dict())
        assert back.steps_per_stage == 7
        assert back.weights.lambda_col == 0.5

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            FitConfig(steps_per_stage=0)
        with pytest.raises(ConfigError):
            FitConfig(lr_pose=-1.0)


class TestInitHand:
    # Rotation putting the hand's long (finger) axis into the image plane,
    # where the weak-perspective depth rule is accurate.
    ROT6 = np.array([0.0, 0, -1, 0, 1, 0])

    def _evidence_at_depth(self, hand_model, cam, depth, rng):
        theta = rng.normal(scale=0.3, size=16)
        rot6 = self.ROT6
        rot = rot6d_to_matrix(torch.from_numpy(rot6)).numpy()
        with torch.no_grad():
            centered = hand_vertices(hand_model, torch.from_numpy(theta)).numpy()
        world = centered @ rot.T + np.array([0.0, 0.0, depth])
        v2d = np.stack([world[:, 0] / world[:, 2] * cam.fx + cam.cx,
                        world[:, 1] / world[:, 2] * cam.fy + cam.cy], axis=1)
        hi = HandInit(theta_init=theta, rotation_init=rot6, vertices_2d=v2d)
        return FrameEvidence(frame_index=0, hand_init={"hand_right": hi})

    def test_depth_recovery(self, hand_model, camera, rng):
        ev = self._evidence_at_depth(hand_model, camera, 0.5, rng)
        state = init_hand(ev, hand_model, camera, "hand_right")
        with torch.no_grad():
            centered = hand_vertices(hand_model,
                                     torch.from_numpy(state.theta)).numpy()
        world = pose_entity_np(centered, state)
        depth = world.mean(axis=0)[2]
        assert abs(depth - 0.5) / 0.5 < 0.02

    def test_zero_span_rejected(self, hand_model, camera, rng):
        ev = self._evidence_at_depth(hand_model, camera, 0.5, rng)
        ev.hand_init["hand_right"].vertices_2d[:] = 100.0
        with pytest.raises(DegenerateEvidence):
            init_hand(ev, hand_model, camera, "hand_right")

    def test_depth_inverse_proportional_to_span(self, hand_model, camera, rng):
        ev = self._evidence_at_depth(hand_model, camera, 0.5, rng)
        s1 = init_hand(ev, hand_model, camera, "hand_right")
        v2d = ev.hand_init["hand_right"].vertices_2d
        center = v2d.mean(axis=0)
        ev.hand_init["hand_right"].vertices_2d = center + 2.0 * (v2d - center)
        s2 = init_hand(ev, hand_model, camera, "hand_right")

        def centroid_depth(state):
            with torch.no_grad():
                centered = hand_vertices(hand_model,
                                         torch.from_numpy(state.theta)).numpy()
            return pose_entity_np(centered, state).mean(axis=0)[2]

        assert abs(centroid_depth(s2) / centroid_depth(s1) - 0.5) < 1e-6


class TestSampleRotations:
    def test_count_and_validity(self):
        rots = sample_rotations(50, seed=0)
        assert rots.shape == (50, 3, 3)
        eye = np.eye(3)
        for r in rots:
            np.testing.assert_allclose(r @ r.T, eye, atol=1e-12)
            assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_deterministic(self):
        np.testing.assert_array_equal(sample_rotations(10, 3),
                                      sample_rotations(10, 3))

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            sample_rotations(0, 0)


class TestInitObjectTranslation:
    def test_sphere_roundtrip(self, camera):
        mesh = icosphere(0.05, 2)
        gt = np.array([0.05, -0.03, 0.7])
        world = mesh.vertices + gt
        mask = hard_silhouette(world, mesh.faces, camera, (640, 480))
        ys, xs = np.nonzero(mask.binary())
        box = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        t = init_object_translation(mesh, np.eye(3), box, camera)
        assert abs(t[2] - gt[2]) / gt[2] < 0.02
        assert np.linalg.norm(t[:2] - gt[:2]) < 0.01

    def test_centered_symmetric_zero_inplane(self, camera):
        mesh = icosphere(0.05, 2)
        world = mesh.vertices + np.array([0, 0, 0.7])
        mask = hard_silhouette(world, mesh.faces, camera, (640, 480))
        ys, xs = np.nonzero(mask.binary())
        box = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        t = init_object_translation(mesh, np.eye(3), box, camera)
        assert np.linalg.norm(t[:2]) < 0.005

    def test_doubling_diagonal_halves_depth(self, camera):
        mesh = icosphere(0.05, 2)
        box = (300, 220, 340, 260)
        big = (280, 200, 360, 280)  # doubled diagonal around same center
        t1 = init_object_translation(mesh, np.eye(3), box, camera)
        t2 = init_object_translation(mesh, np.eye(3), big, camera)
        assert abs(t2[2] / t1[2] - 0.5) < 0.05

    def test_zero_area_box(self, camera):
        mesh = icosphere(0.05, 2)
        with pytest.raises(DegenerateEvidence):
            init_object_translation(mesh, np.eye(3), (10, 10, 10, 20), camera)


class TestRefineObjectSilhouette:
    def test_fixed_point(self, camera):
        mesh = icosphere(0.05, 2)
        cam = camera.scaled(2)
        state = BodyState(rotation=[1, 0, 0, 0, 1, 0], translation=[0, 0, 0.6])
        world = pose_entity_np(mesh.vertices, state)
        # Target equal to the state's own soft render: exact fixed point,
        # so the optimizer receives zero gradient and must not move.
        from graspfit.render import RenderConfig, soft_silhouette
        sigma = 0.3
        soft = soft_silhouette(torch.from_numpy(world), mesh.faces, cam,
                               RenderConfig((cam.width, cam.height), sigma=sigma))
        target = MaskImage(soft.numpy())
        occ = MaskImage.zeros(cam.width, cam.height)
        config = FitConfig(steps_per_stage=10, render_sigma=sigma)
        refined, iou = refine_object_silhouette(state, target, occ, cam, mesh,
                                                config)
        assert iou >= 0.95
        assert np.linalg.norm(refined.translation - state.translation) < 1e-3
        assert np.linalg.norm(refined.rotation - state.rotation) < 1e-3

    def test_full_occlusion_no_gradient(self, camera):
        mesh = icosphere(0.05, 2)
        cam = camera.scaled(4)
        state = BodyState(rotation=[1, 0, 0, 0, 1, 0], translation=[0, 0, 0.6])
        target = MaskImage(np.ones((cam.height, cam.width)))
        occ = MaskImage(np.ones((cam.height, cam.width)))
        config = FitConfig(steps_per_stage=4)
        refined, _ = refine_object_silhouette(state, target, occ, cam, mesh,
                                              config)
        np.testing.assert_allclose(refined.translation, state.translation,
                                   atol=1e-12)
        np.testing.assert_allclose(refined.rotation, state.rotation, atol=1e-12)


class TestFitJoint:
    def test_zero_weights_identity(self, tiny_scene):
        clip, assets, gt_state, _ = tiny_scene
        zero = LossWeights(**{f"lambda_{t}": 0.0 for t in TERM_NAMES})
        config = FitConfig(steps_per_stage=3, weights=zero)
        result = fit_joint(gt_state, clip, assets, config)
        for name, ent in result.state.entities.items():
            np.testing.assert_array_equal(ent.rot6d, gt_state.entities[name].rot6d)
            np.testing.assert_array_equal(ent.translation,
                                          gt_state.entities[name].translation)

    def test_trace_lengths(self, tiny_scene):
        clip, assets, gt_state, _ = tiny_scene
        config = FitConfig(steps_per_stage=5)
        assert len(fit_joint(gt_state, clip, assets, config).trace) == 10
        assert len(fit_joint(gt_state, clip, assets, config,
                             stage="coarse-only").trace) == 5

    def test_stage_endpoints_do_not_increase(self, tiny_scene):
        clip, assets, gt_state, _ = tiny_scene
        init = perturb_state(gt_state, rot_deg=5.0, trans_m=0.01,
                             theta_sigma=0.2, seed=1)
        config = FitConfig(steps_per_stage=25)
        result = fit_joint(init, clip, assets, config, stage="coarse-only")
        assert result.trace[-1].total <= result.trace[0].total + 1e-9

    def test_deterministic(self, tiny_scene):
        clip, assets, gt_state, _ = tiny_scene
        init = perturb_state(gt_state, rot_deg=5.0, trans_m=0.01, seed=1)
        config = FitConfig(steps_per_stage=4)
        a = fit_joint(init, clip, assets, config)
        b = fit_joint(init, clip, assets, config)
        for name in a.state.entities:
            np.testing.assert_array_equal(a.state.entities[name].rot6d,
                                          b.state.entities[name].rot6d)
            np.testing.assert_array_equal(a.state.entities[name].translation,
                                          b.state.entities[name].translation)
        assert [t.total for t in a.trace] == [t.total for t in b.trace]


class TestEntityTrack:
    def test_state_at(self, rng):
        ent = EntityTrack(kind="object", rot6d=rng.standard_normal((3, 6)),
                          translation=rng.standard_normal((3, 3)), theta=None,
                          scale=1.2)
        s = ent.state_at(1)
        np.testing.assert_array_equal(s.rotation, ent.rot6d[1])
        assert s.scale == 1.2 and s.theta is None

    def test_dict_roundtrip(self, rng):
        ent = EntityTrack(kind="hand_right", rot6d=rng.standard_normal((2, 6)),
                          translation=rng.standard_normal((2, 3)),
                          theta=rng.standard_normal((2, 16)), scale=0.9)
        back = EntityTrack.from_dict(ent.to_dict())
        np.testing.assert_array_equal(back.theta, ent.theta)
        assert back.kind == "hand_right" and back.scale == 0.9

    def test_invalid_scale(self, rng):
        with pytest.raises(ValueError):
            EntityTrack(kind="object", rot6d=np.zeros((1, 6)),
                        translation=np.zeros((1, 3)), theta=None, scale=-1.0)
