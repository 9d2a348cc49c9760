"""Synthetic clip generation with exact ground truth.

Builds hand+object trajectories, renders their masks, and writes evidence
files in the same schema the fitter consumes, so every quantitative check
can run against known ground truth at desk scale.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .fitting import ClipState, EntityTrack, SceneAssets, pose_entity_np
from .geometry import CameraIntrinsics, TriMesh, matrix_to_rot6d, rot6d_to_matrix
from .hand import build_test_hand, hand_vertices
from .masks import MaskImage
from .metrics import contact_flag
from .render import hard_silhouette
from .sdf import build_sdf_grid, check_watertight
from .shapes import box, icosphere
from .tracking import Detection, EvidenceClip, FrameEvidence, HandInit, save_evidence

DEFAULT_SCENE = {
    "object": "cube",           # cube | sphere | path to an OBJ file
    "object_size": 0.08,        # meters (edge / diameter)
    "n_frames": 10,
    "motion": "static",         # static | linear
    "motion_step": 0.002,       # meters per frame along +x for "linear"
    "depth": 0.6,               # object center depth, meters
    "hand_offset": [-0.13, 0.0, 0.0],
    "sides": ["hand_right"],
    "sigma_px": 0.0,            # Gaussian noise on 2D hand vertices
    "p_drop": 0.0,              # per-frame detection drop probability
    "box_jitter_px": 0.0,
    "mask_shift_px": 0.0,       # per-frame random object mask translation
    "theta_scale": 0.3,
    "seed": 0,
    "camera": {"fx": 600.0, "fy": 600.0, "cx": 320.0, "cy": 240.0,
               "width": 640, "height": 480},
}


def _object_mesh(spec: dict) -> TriMesh:
    kind = spec["object"]
    size = float(spec["object_size"])
    if kind == "cube":
        return box((size, size, size))
    if kind == "sphere":
        return icosphere(size / 2, 3)
    mesh = TriMesh.load_obj(kind)
    check_watertight(mesh)
    return mesh


def make_scene_spec(**overrides) -> dict:
    spec = json.loads(json.dumps(DEFAULT_SCENE))
    unknown = set(overrides) - set(spec)
    if unknown:
        raise ConfigError(f"unknown scene keys {sorted(unknown)}")
    spec.update(overrides)
    return spec


def ground_truth_clip(spec: dict) -> tuple[ClipState, SceneAssets, CameraIntrinsics]:
    """Deterministic GT trajectory for a scene spec."""
    rng = np.random.default_rng(int(spec["seed"]))
    cam = CameraIntrinsics.from_dict(spec["camera"])
    mesh = _object_mesh(spec)
    check_watertight(mesh)
    n = int(spec["n_frames"])
    if n < 1:
        raise ConfigError("n_frames must be at least 1")

    depth = float(spec["depth"])
    step = float(spec["motion_step"]) if spec["motion"] == "linear" else 0.0
    obj_center = np.array([0.0, 0.0, depth])
    obj_rot = _random_rotation(rng)
    obj_rot6 = np.concatenate([obj_rot[:, 0], obj_rot[:, 1]])
    obj_trans = np.stack([obj_center + np.array([step * t, 0.0, 0.0])
                          for t in range(n)])
    entities = {"object": EntityTrack(
        kind="object", rot6d=np.tile(obj_rot6, (n, 1)),
        translation=obj_trans, theta=None, scale=1.0)}

    hand_models = {}
    for side in spec["sides"]:
        model = build_test_hand(seed=int(spec["seed"]), side=side.split("_")[1])
        hand_models[side] = model
        theta = rng.normal(scale=float(spec["theta_scale"]), size=model.latent_dim)
        rot = _random_rotation(rng)
        rot6 = np.concatenate([rot[:, 0], rot[:, 1]])
        offset = np.asarray(spec["hand_offset"], dtype=np.float64)
        trans = obj_trans + offset
        entities[side] = EntityTrack(
            kind=side, rot6d=np.tile(rot6, (n, 1)), translation=trans,
            theta=np.tile(theta, (n, 1)), scale=1.0)
    state = ClipState(entities=entities)
    assets = SceneAssets(hand_models=hand_models, object_mesh=mesh)
    return state, assets, cam


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def _entity_world(state: ClipState, assets: SceneAssets, name: str,
                  t: int) -> np.ndarray:
    ent = state.entities[name]
    if name == "object":
        verts = assets.object_mesh.vertices
    else:
        with torch.no_grad():
            verts = hand_vertices(assets.hand_models[name],
                                  torch.from_numpy(ent.theta[t])).numpy()
    return pose_entity_np(verts, ent.state_at(t))


def _tight_box(mask: MaskImage):
    ys, xs = np.nonzero(mask.binary())
    if len(xs) == 0:
        return None
    return [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]


def generate_clip(spec: dict, out_dir) -> Path:
    """Write a full scene directory: gt_states.json, evidence.json, masks/,
    meshes/. All randomness is seeded by spec["seed"]."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(parents=True, exist_ok=True)

    state, assets, cam = ground_truth_clip(spec)
    rng = np.random.default_rng(int(spec["seed"]) + 1)
    n = state.n_frames
    sides = list(assets.hand_models)
    faces = {name: (assets.object_mesh.faces if name == "object"
                    else assets.hand_models[name].faces.astype(np.int64))
             for name in state.entities}

    obj_sdf = build_sdf_grid(assets.object_mesh)
    frames = []
    mask_files: dict[int, dict[str, str]] = {}
    contact = []
    for t in range(n):
        entry_masks = {}
        dets = []
        frame_boxes = {}
        for name in state.entities:
            world = _entity_world(state, assets, name, t)
            mask = hard_silhouette(world, faces[name], cam, (cam.width, cam.height))
            if name == "object" and spec["mask_shift_px"] > 0:
                shift = rng.integers(-int(spec["mask_shift_px"]),
                                     int(spec["mask_shift_px"]) + 1, size=2)
                mask = MaskImage(np.roll(mask.values, (shift[1], shift[0]), axis=(0, 1)))
            fname = f"masks/{t:04d}_{name}.png"
            mask.save_png(out / fname)
            entry_masks[name] = fname
            tb = _tight_box(mask)
            if tb is not None:
                frame_boxes[name] = tb

        dropped = rng.uniform() < float(spec["p_drop"])
        if not dropped:
            for name, tb in frame_boxes.items():
                jit = rng.uniform(-float(spec["box_jitter_px"]),
                                  float(spec["box_jitter_px"]), size=4) \
                    if spec["box_jitter_px"] > 0 else np.zeros(4)
                dets.append(Detection(box=tuple(np.array(tb) + jit),
                                      score=1.0, kind=name))

        hand_init = {}
        for side in sides:
            ent = state.entities[side]
            world = _entity_world(state, assets, side, t)
            z = world[:, 2]
            v2d = np.stack([world[:, 0] / z * cam.fx + cam.cx,
                            world[:, 1] / z * cam.fy + cam.cy], axis=1)
            if spec["sigma_px"] > 0:
                v2d = v2d + rng.normal(scale=float(spec["sigma_px"]), size=v2d.shape)
            hand_init[side] = HandInit(theta_init=ent.theta[t],
                                       rotation_init=ent.rot6d[t],
                                       vertices_2d=v2d)

        in_contact = any(
            contact_flag(_to_object_frame(
                _entity_world(state, assets, side, t),
                state.entities["object"].state_at(t)), obj_sdf)
            for side in sides)
        contact.append(bool(in_contact))
        frames.append(FrameEvidence(frame_index=t, detections=dets,
                                    hand_init=hand_init))
        mask_files[t] = entry_masks

    clip = EvidenceClip(camera=cam, frames=frames)
    save_evidence(clip, out / "evidence.json", mask_files)

    assets.object_mesh.save_obj(out / "meshes" / "object.obj")
    for side, model in assets.hand_models.items():
        model.save(out / "meshes" / f"{side}.npz")

    gt = {"clip_state": state.to_dict(), "camera": cam.to_dict(),
          "contact": contact, "scene": spec}
    (out / "gt_states.json").write_text(json.dumps(gt, sort_keys=True))
    return out


def _to_object_frame(world_pts: np.ndarray, obj_state) -> np.ndarray:
    rot = rot6d_to_matrix(torch.from_numpy(obj_state.rotation)).numpy()
    return (world_pts - obj_state.translation) @ rot / obj_state.scale


def load_scene(scene_dir) -> tuple[EvidenceClip, SceneAssets, ClipState, list[bool]]:
    """Read back a generated scene directory."""
    from .hand import ParametricHandModel
    from .tracking import load_evidence

    scene_dir = Path(scene_dir)
    clip = load_evidence(scene_dir / "evidence.json")
    gt = json.loads((scene_dir / "gt_states.json").read_text())
    state = ClipState.from_dict(gt["clip_state"])
    mesh = TriMesh.load_obj(scene_dir / "meshes" / "object.obj")
    hands = {}
    for p in sorted((scene_dir / "meshes").glob("hand_*.npz")):
        hands[p.stem] = ParametricHandModel.load(p)
    assets = SceneAssets(hand_models=hands, object_mesh=mesh)
    return clip, assets, state, [bool(c) for c in gt.get("contact", [])]


def perturb_state(gt: ClipState, rot_deg: float = 0.0, trans_m: float = 0.0,
                  theta_sigma: float = 0.0, seed: int = 0) -> ClipState:
    """Seeded controlled perturbation of every entity's per-frame pose."""
    rng = np.random.default_rng(seed)
    entities = {}
    for name, ent in gt.entities.items():
        rot6d = ent.rot6d.copy()
        trans = ent.translation.copy()
        theta = ent.theta.copy() if ent.theta is not None else None
        for t in range(ent.n_frames):
            if rot_deg > 0:
                axis = rng.standard_normal(3)
                axis /= np.linalg.norm(axis)
                pert = _axis_angle(axis, np.deg2rad(rot_deg))
                base = rot6d_to_matrix(torch.from_numpy(rot6d[t])).numpy()
                rot6d[t] = matrix_to_rot6d(torch.from_numpy(pert @ base)).numpy()
            if trans_m > 0:
                d = rng.standard_normal(3)
                trans[t] += d / np.linalg.norm(d) * trans_m
            if theta is not None and theta_sigma > 0:
                theta[t] += rng.normal(scale=theta_sigma, size=theta.shape[1])
        entities[name] = EntityTrack(kind=ent.kind, rot6d=rot6d, translation=trans,
                                     theta=theta, scale=ent.scale,
                                     optimize_scale=ent.optimize_scale)
    return ClipState(entities=entities)


def bias_depth(state: ClipState, entity: str, delta_m: float) -> ClipState:
    """Move an entity along its viewing ray by delta_m, rescaling so its
    projection is (nearly) unchanged: the scale-depth ambiguous direction."""
    entities = {}
    for name, ent in state.entities.items():
        if name != entity:
            entities[name] = ent
            continue
        trans = ent.translation.copy()
        factors = (trans[:, 2] + delta_m) / trans[:, 2]
        trans = trans * factors[:, None]
        entities[name] = EntityTrack(
            kind=ent.kind, rot6d=ent.rot6d.copy(), translation=trans,
            theta=None if ent.theta is None else ent.theta.copy(),
            scale=ent.scale * float(factors.mean()),
            optimize_scale=ent.optimize_scale)
    return ClipState(entities=entities)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
