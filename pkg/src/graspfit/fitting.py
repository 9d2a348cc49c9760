"""Pose initialization and the two-stage joint optimization over a clip.

Stage 1 (coarse) optimizes the data, regularization and coarse-interaction
terms; stage 2 adds the local contact and collision terms. Both run Adam
with separate learning rates for articulated/rotation parameters and for
translations/scales.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .errors import (
    ConfigError,
    DegenerateEvidence,
    DivergedFit,
    MissingEvidence,
)
from .geometry import CameraIntrinsics, TriMesh, project, rot6d_to_matrix
from .hand import BodyState, ParametricHandModel, hand_vertices, pose_vertices
from .losses import (
    LossBreakdown,
    LossWeights,
    loss_centroid,
    loss_contact,
    loss_obj,
    loss_pca,
    loss_scale,
    loss_smooth,
    loss_v2d,
    total_loss,
)
from .masks import MaskImage, union
from .render import RenderConfig, hard_silhouette, mask_iou, soft_silhouette
from .sdf import SdfCache, query_values
from .tracking import EvidenceClip, box_iou

COARSE_TERMS = ("obj", "v2d", "pca", "scale", "smooth", "centroid")
FULL_TERMS = COARSE_TERMS + ("local", "col")

_CONFIG_KEYS = {
    "steps_per_stage", "lr_pose", "lr_translation_scale", "adam_betas",
    "adam_eps", "n_rotation_candidates", "weights", "rng_seed",
    "render_downscale", "render_sigma", "carry_adam_state",
    "sdf_resolution", "approximate_object_model", "optimize_hand_scale",
}


@dataclass
class FitConfig:
    steps_per_stage: int = 200
    lr_pose: float = 0.1                  # theta and 6D rotations
    lr_translation_scale: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_rotation_candidates: int = 50
    weights: LossWeights = field(default_factory=LossWeights)
    rng_seed: int = 0
    render_downscale: int = 4
    # Small sigma keeps the soft mask's 0.5 level set close to the true
    # silhouette; larger values inflate it and bias the object deeper.
    render_sigma: float = 0.05
    # Continuing the same Adam run into the refinement stage avoids the
    # re-crash a fresh optimizer causes: full-rate normalized first steps
    # from near-equilibrium gradients kick every parameter at once.
    carry_adam_state: bool = True
    sdf_resolution: int = 32
    approximate_object_model: bool = False  # if set, s_obj is optimized
    optimize_hand_scale: bool = True        # shared s_hand free by default

    def __post_init__(self):
        if self.steps_per_stage < 1:
            raise ConfigError("steps_per_stage must be at least 1")
        if self.lr_pose <= 0 or self.lr_translation_scale <= 0:
            raise ConfigError("learning rates must be positive")
        if self.n_rotation_candidates < 1:
            raise ConfigError("n_rotation_candidates must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _CONFIG_KEYS if k != "weights"}
        d["adam_betas"] = list(self.adam_betas)
        d["weights"] = self.weights.to_dict()
        return d


@dataclass
class EntityTrack:
    """Per-frame states of one entity plus its shared scale."""

    kind: str                       # hand_left | hand_right | object
    rot6d: np.ndarray               # (T, 6)
    translation: np.ndarray         # (T, 3)
    theta: Optional[np.ndarray]     # (T, K) for hands, None for objects
    scale: float = 1.0
    optimize_scale: bool = False

    def __post_init__(self):
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64).reshape(-1, 6)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(-1, 3)
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.rot6d)

    def state_at(self, t: int) -> BodyState:
        theta = self.theta[t] if self.theta is not None else None
        return BodyState(rotation=self.rot6d[t], translation=self.translation[t],
                         scale=self.scale, theta=theta)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "rot6d": self.rot6d.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
            "optimize_scale": self.optimize_scale,
        }
        if self.theta is not None:
            d["theta"] = self.theta.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EntityTrack":
        return cls(kind=d["kind"], rot6d=np.array(d["rot6d"]),
                   translation=np.array(d["translation"]),
                   theta=np.array(d["theta"]) if "theta" in d else None,
                   scale=float(d.get("scale", 1.0)),
                   optimize_scale=bool(d.get("optimize_scale", False)))


@dataclass
class ClipState:
    entities: dict[str, EntityTrack]

    @property
    def n_frames(self) -> int:
        return next(iter(self.entities.values())).n_frames

    def hands(self) -> dict[str, EntityTrack]:
        return {k: v for k, v in self.entities.items() if k != "object"}

    def to_dict(self) -> dict:
        return {"entities": {k: v.to_dict() for k, v in self.entities.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ClipState":
        return cls(entities={k: EntityTrack.from_dict(v)
                             for k, v in d["entities"].items()})


@dataclass
class FitResult:
    state: ClipState
    trace: list[LossBreakdown]
    mask_iou: list[float]           # per frame, object render vs target
    wall_time: float


@dataclass
class SceneAssets:
    hand_models: dict[str, ParametricHandModel]
    object_mesh: TriMesh


def _fbar(cam: CameraIntrinsics) -> float:
    return (cam.fx + cam.fy) / 2.0


def _max_pairwise(points: np.ndarray) -> float:
    from scipy.spatial.distance import pdist
    if len(points) < 2:
        return 0.0
    return float(pdist(points).max())


def init_hand(evidence, model: ParametricHandModel, cam: CameraIntrinsics,
              side: str) -> BodyState:
    """Initial hand state from regressor evidence.

    theta and rotation are taken as-is; depth comes from matching the
    model's 3D vertex span against the 2D vertex span (weak perspective);
    in-plane translation centers the projection on the 2D vertex centroid.
    """
    if side not in evidence.hand_init:
        raise MissingEvidence(f"no hand_init for {side} in frame {evidence.frame_index}")
    init = evidence.hand_init[side]
    with torch.no_grad():
        centered = hand_vertices(model, torch.from_numpy(init.theta_init)).numpy()
    span3d = _max_pairwise(centered)
    span2d = _max_pairwise(init.vertices_2d)
    if span2d < 1e-9:
        raise DegenerateEvidence("2D hand vertices have zero span")
    depth = _fbar(cam) * span3d / span2d
    u, v = init.vertices_2d.mean(axis=0)
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0]) * depth
    rot = rot6d_to_matrix(torch.from_numpy(init.rotation_init)).numpy()
    translation = ray - rot @ centered.mean(axis=0)
    return BodyState(rotation=init.rotation_init, translation=translation,
                     scale=1.0, theta=init.theta_init)


def sample_rotations(n: int, seed: int) -> np.ndarray:
    """n i.i.d. Haar-uniform rotation matrices via normalized quaternions."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def init_object_translation(mesh: TriMesh, rotation: np.ndarray, box,
                            cam: CameraIntrinsics, max_iters: int = 50,
                            tol: float = 1e-4) -> np.ndarray:
    """Translation placing the rotated mesh inside a 2D detection box.

    Alternates a depth update from the ratio of projected and detected box
    diagonals with an in-plane recentering, starting from a similar-
    triangles depth guess.
    """
    x0, y0, x1, y1 = box
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateEvidence("zero-area detection box")
    box_diag = float(np.hypot(x1 - x0, y1 - y0))
    box_center = np.array([(x0 + x1) / 2, (y0 + y1) / 2])

    rv = mesh.vertices @ np.asarray(rotation).T
    diag3d = float(np.linalg.norm(rv.max(axis=0) - rv.min(axis=0)))
    depth = _fbar(cam) * diag3d / box_diag
    ray = np.array([(box_center[0] - cam.cx) / cam.fx,
                    (box_center[1] - cam.cy) / cam.fy, 1.0])
    translation = ray * depth - rv.mean(axis=0)

    for _ in range(max_iters):
        world = rv + translation
        if (world[:, 2] <= 0).any():
            world[:, 2] = np.maximum(world[:, 2], 1e-3)
        u = world[:, 0] / world[:, 2] * cam.fx + cam.cx
        v = world[:, 1] / world[:, 2] * cam.fy + cam.cy
        proj_diag = float(np.hypot(u.max() - u.min(), v.max() - v.min()))
        center = rv.mean(axis=0) + translation
        old_depth = center[2]
        new_depth = old_depth * proj_diag / box_diag
        new_center = center * (new_depth / old_depth)
        proj_center = np.array([(u.max() + u.min()) / 2, (v.max() + v.min()) / 2])
        shift = np.array([
            (box_center[0] - proj_center[0]) / cam.fx * new_depth,
            (box_center[1] - proj_center[1]) / cam.fy * new_depth, 0.0])
        new_translation = translation + (new_center - center) + shift
        step = float(np.linalg.norm(new_translation - translation))
        translation = new_translation
        if step < tol:
            break
    return translation


def _masked_target(target: MaskImage, occlusion: MaskImage) -> MaskImage:
    vals = np.where(occlusion.values > 0.5, 0.0, target.values)
    return MaskImage(vals)


def _selection_iou(verts: np.ndarray, faces: np.ndarray, cam: CameraIntrinsics,
                   target: MaskImage, occlusion: MaskImage) -> float:
    rendered = hard_silhouette(verts, faces, cam, (cam.width, cam.height))
    rendered = _masked_target(rendered, occlusion)
    return mask_iou(rendered, _masked_target(target, occlusion))


def refine_object_silhouette(state: BodyState, target: MaskImage,
                             hand_occlusion: MaskImage, cam: CameraIntrinsics,
                             mesh: TriMesh, config: FitConfig):
    """Refine one frame's object pose against its segmentation mask.

    Minimizes the occlusion-gated silhouette loss over rotation and
    translation with Adam for steps_per_stage / 2 steps. Returns the
    refined state and its hard-render IoU.
    """
    rot = torch.tensor(state.rotation, requires_grad=True)
    trans = torch.tensor(state.translation, requires_grad=True)
    verts_c = torch.from_numpy(mesh.vertices)
    target_t = torch.from_numpy(target.values)
    occ_t = torch.from_numpy(hand_occlusion.values)
    rcfg = RenderConfig((cam.width, cam.height), sigma=config.render_sigma)
    scale_t = torch.tensor(state.scale, dtype=torch.float64)
    opt = torch.optim.Adam(
        [{"params": [rot], "lr": config.lr_pose},
         {"params": [trans], "lr": config.lr_translation_scale}],
        betas=config.adam_betas, eps=config.adam_eps)
    steps = max(1, config.steps_per_stage // 2)
    for _ in range(steps):
        opt.zero_grad()
        world = pose_vertices(verts_c, rot6d_to_matrix(rot), trans, scale_t)
        rendered = soft_silhouette(world, mesh.faces, cam, rcfg)
        loss = loss_obj(rendered, target_t, occ_t)
        loss.backward()
        opt.step()
    refined = BodyState(rotation=rot.detach().numpy(),
                        translation=trans.detach().numpy(),
                        scale=state.scale, theta=None)
    with torch.no_grad():
        world = pose_vertices(verts_c, rot6d_to_matrix(rot), trans, scale_t)
    iou = _selection_iou(world.numpy(), mesh.faces, cam, target, hand_occlusion)
    return refined, iou


def init_object_motion(mesh: TriMesh, clip: EvidenceClip, config: FitConfig,
                       cam_render: Optional[CameraIntrinsics] = None) -> list[BodyState]:
    """Candidate-rotation object initialization over a clip.

    Each sampled rotation seeds frame 0 (box alignment plus silhouette
    refinement); later frames chain from the previous refined pose. The
    candidate with the highest mean occlusion-masked IoU wins, lowest
    index on ties.
    """
    frames = [f for f in clip.frames if f.object_mask is not None]
    if not frames:
        raise MissingEvidence("no frames with object masks")
    ds = config.render_downscale
    cam = cam_render or clip.camera.scaled(ds)
    rotations = sample_rotations(config.n_rotation_candidates, config.rng_seed)

    prepared = []
    for fr in clip.frames:
        target = fr.object_mask.downscale(ds) if fr.object_mask else MaskImage.zeros(cam.width, cam.height)
        occ = union([m.downscale(ds) for m in fr.hand_masks.values()],
                    cam.width, cam.height)
        det_box = None
        for d in fr.detections:
            if d.kind == "object":
                det_box = np.array(d.box) / ds
                break
        if det_box is None:
            ys, xs = np.nonzero(target.binary())
            if len(xs):
                det_box = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1],
                                   dtype=np.float64)
        prepared.append((target, occ, det_box))

    best_states: Optional[list[BodyState]] = None
    best_iou = -1.0
    for rot_mat in rotations:
        rot6 = np.concatenate([rot_mat[:, 0], rot_mat[:, 1]])
        states: list[BodyState] = []
        ious: list[float] = []
        prev: Optional[BodyState] = None
        for (target, occ, det_box) in prepared:
            if prev is None:
                if det_box is None:
                    continue
                translation = init_object_translation(mesh, rot_mat, det_box, cam)
                state = BodyState(rotation=rot6, translation=translation)
            else:
                state = BodyState(rotation=prev.rotation, translation=prev.translation)
            state, iou = refine_object_silhouette(state, target, occ, cam, mesh, config)
            states.append(state)
            ious.append(iou)
            prev = state
        if states and float(np.mean(ious)) > best_iou:
            best_iou = float(np.mean(ious))
            best_states = states
    if best_states is None:
        raise MissingEvidence("no candidate could be initialized")
    return best_states


class _PreparedClip:
    """Evidence tensors at render resolution plus per-frame gating flags."""

    def __init__(self, clip: EvidenceClip, assets: SceneAssets, config: FitConfig):
        ds = config.render_downscale
        self.cam_full = clip.camera
        self.cam = clip.camera.scaled(ds)
        self.render_cfg = RenderConfig((self.cam.width, self.cam.height),
                                       sigma=config.render_sigma)
        self.n_frames = clip.n_frames
        self.object_targets: list[torch.Tensor] = []
        self.occlusions: list[torch.Tensor] = []
        self.v2d: dict[str, torch.Tensor] = {}
        self.overlap: dict[str, np.ndarray] = {}
        self.raw_targets: list[MaskImage] = []
        self.raw_occlusions: list[MaskImage] = []

        sides = sorted({s for f in clip.frames for s in f.hand_init})
        v2d_frames = {s: [] for s in sides}
        overlap_frames = {s: [] for s in sides}
        last_overlap = {s: False for s in sides}
        for fr in clip.frames:
            if fr.object_mask is not None:
                tgt = fr.object_mask.downscale(ds)
                occ = union([m.downscale(ds) for m in fr.hand_masks.values()],
                            self.cam.width, self.cam.height)
            else:
                # No mask: gate the whole frame out of the silhouette loss.
                tgt = MaskImage.zeros(self.cam.width, self.cam.height)
                occ = MaskImage(np.ones((self.cam.height, self.cam.width)))
            self.raw_targets.append(tgt)
            self.raw_occlusions.append(occ)
            self.object_targets.append(torch.from_numpy(tgt.values))
            self.occlusions.append(torch.from_numpy(occ.values))

            boxes = {d.kind: d.box for d in fr.detections}
            for s in sides:
                if s not in fr.hand_init:
                    raise MissingEvidence(
                        f"hand_init for {s} missing in frame {fr.frame_index}")
                v2d_frames[s].append(fr.hand_init[s].vertices_2d)
                if s in boxes and "object" in boxes:
                    last_overlap[s] = box_iou(boxes[s], boxes["object"]) > 0
                overlap_frames[s].append(last_overlap[s])
        for s in sides:
            self.v2d[s] = torch.from_numpy(np.stack(v2d_frames[s]))
            self.overlap[s] = np.array(overlap_frames[s], dtype=bool)


class _Parameters:
    """Torch views of a ClipState for optimization."""

    def __init__(self, state: ClipState, config: FitConfig):
        self.tensors: dict[str, dict[str, torch.Tensor]] = {}
        self.scale_optimized: dict[str, bool] = {}
        for name, ent in state.entities.items():
            t = {
                "rot6d": torch.tensor(ent.rot6d, requires_grad=True),
                "trans": torch.tensor(ent.translation, requires_grad=True),
            }
            if ent.theta is not None:
                t["theta"] = torch.tensor(ent.theta, requires_grad=True)
            if name == "object":
                optimize_scale = (ent.optimize_scale
                                  or config.approximate_object_model)
            else:
                optimize_scale = config.optimize_hand_scale
            t["scale"] = torch.tensor(float(ent.scale), dtype=torch.float64,
                                      requires_grad=optimize_scale)
            self.scale_optimized[name] = optimize_scale
            self.tensors[name] = t

    def groups(self, config: FitConfig) -> list[dict]:
        pose, ts = [], []
        for t in self.tensors.values():
            pose.append(t["rot6d"])
            if "theta" in t:
                pose.append(t["theta"])
            ts.append(t["trans"])
            if t["scale"].requires_grad:
                ts.append(t["scale"])
        return [{"params": pose, "lr": config.lr_pose},
                {"params": ts, "lr": config.lr_translation_scale}]

    def to_state(self, template: ClipState) -> ClipState:
        entities = {}
        for name, ent in template.entities.items():
            t = self.tensors[name]
            entities[name] = EntityTrack(
                kind=ent.kind,
                rot6d=t["rot6d"].detach().numpy().copy(),
                translation=t["trans"].detach().numpy().copy(),
                theta=t["theta"].detach().numpy().copy() if "theta" in t else None,
                scale=float(t["scale"].detach()),
                optimize_scale=ent.optimize_scale)
        return ClipState(entities=entities)


def _sdf_world(grid, rot_mat, trans, scale, world_pts):
    """Metric SDF of a posed entity, queried at world points: transform into
    the canonical frame, look up, rescale."""
    local = torch.einsum("ji,vj->vi", rot_mat, (world_pts - trans)) / scale
    return scale * query_values(grid, local)


def evaluate_objective(params: _Parameters, prepared: _PreparedClip,
                       assets: SceneAssets, config: FitConfig,
                       weights: LossWeights, active_terms,
                       sdf_caches: Optional[dict] = None):
    """One evaluation of the clip objective; returns (total, breakdown)."""
    obj = params.tensors["object"]
    obj_rots = rot6d_to_matrix(obj["rot6d"])
    obj_verts_c = torch.from_numpy(assets.object_mesh.vertices)
    obj_world = pose_vertices(obj_verts_c, obj_rots,
                              obj["trans"], obj["scale"].expand(prepared.n_frames))

    hand_world: dict[str, torch.Tensor] = {}
    hand_rots: dict[str, torch.Tensor] = {}
    hand_centered: dict[str, torch.Tensor] = {}
    for side, t in params.tensors.items():
        if side == "object":
            continue
        centered = hand_vertices(assets.hand_models[side], t["theta"])
        hand_centered[side] = centered
        rots = rot6d_to_matrix(t["rot6d"])
        hand_rots[side] = rots
        hand_world[side] = pose_vertices(
            centered, rots, t["trans"], t["scale"].expand(prepared.n_frames))

    terms: dict[str, torch.Tensor] = {}

    if "obj" in active_terms and weights["obj"] > 0:
        per_frame = []
        for ti in range(prepared.n_frames):
            rendered = soft_silhouette(obj_world[ti], assets.object_mesh.faces,
                                       prepared.cam, prepared.render_cfg)
            per_frame.append(loss_obj(rendered, prepared.object_targets[ti],
                                      prepared.occlusions[ti]))
        terms["obj"] = torch.stack(per_frame).mean()

    if "v2d" in active_terms and hand_world:
        v2d_losses = []
        diag = prepared.cam_full.diagonal
        for side, world in hand_world.items():
            projected = project(prepared.cam_full, world)
            v2d_losses.append(loss_v2d(projected, prepared.v2d[side], diag))
        terms["v2d"] = torch.stack(v2d_losses).mean()

    if "pca" in active_terms and hand_world:
        terms["pca"] = sum(loss_pca(t["theta"])
                           for s, t in params.tensors.items() if s != "object")

    if "scale" in active_terms:
        opt_scales = [t["scale"] for name, t in params.tensors.items()
                      if params.scale_optimized[name]]
        if opt_scales:
            terms["scale"] = loss_scale(opt_scales)

    if "smooth" in active_terms:
        terms["smooth"] = loss_smooth([obj_world, *hand_world.values()])

    if "centroid" in active_terms and hand_world:
        cent = torch.zeros((), dtype=torch.float64)
        for side, world in hand_world.items():
            for ti in range(prepared.n_frames):
                if prepared.overlap[side][ti]:
                    # Attract the hand only: the object pose is pinned by its
                    # silhouette, so its centroid is treated as a constant.
                    cent = cent + loss_centroid(world[ti],
                                                obj_world[ti].detach(), True)
        terms["centroid"] = cent

    needs_sdf = ("local" in active_terms and weights["local"] > 0) or (
        "col" in active_terms and weights["col"] > 0)
    if needs_sdf and hand_world:
        caches = sdf_caches if sdf_caches is not None else {}
        if "object" not in caches:
            caches["object"] = SdfCache(assets.object_mesh.faces,
                                        config.sdf_resolution)
        obj_grid = caches["object"].get(assets.object_mesh.vertices)

        # Vertex-based distance terms need the object *surface*, not just
        # its vertices: a coarse primitive (a 8-vertex box) would otherwise
        # attract hand vertices toward its corners. Densify once per call;
        # the samples transform linearly so gradients are unaffected.
        if "object_dense" not in caches:
            caches["object_dense"] = _dense_surface(assets.object_mesh)
        obj_dense_c = torch.from_numpy(caches["object_dense"])
        obj_dense_world = pose_vertices(
            obj_dense_c, obj_rots, obj["trans"],
            obj["scale"].expand(prepared.n_frames))

        hand_grids: dict[str, list] = {}
        for side, centered in hand_centered.items():
            grids = []
            for ti in range(prepared.n_frames):
                key = (side, ti)
                if key not in caches:
                    caches[key] = SdfCache(
                        assets.hand_models[side].faces.astype(np.int64),
                        config.sdf_resolution)
                grids.append(caches[key].get(centered[ti].detach().numpy()))
            hand_grids[side] = grids

        if "col" in active_terms and weights["col"] > 0:
            col = torch.zeros((), dtype=torch.float64)
            for ti in range(prepared.n_frames):
                ents = [("object", obj_grid, obj_rots[ti], obj["trans"][ti],
                         obj["scale"], obj_dense_world[ti])]
                for side in hand_world:
                    t = params.tensors[side]
                    ents.append((side, hand_grids[side][ti], hand_rots[side][ti],
                                 t["trans"][ti], t["scale"], hand_world[side][ti]))
                for k, (_, grid_k, rot_k, trans_k, scale_k, _) in enumerate(ents):
                    for l, (_, _, _, _, _, verts_l) in enumerate(ents):
                        if k == l:
                            continue
                        sdf = _sdf_world(grid_k, rot_k, trans_k, scale_k, verts_l)
                        col = col + torch.clamp(-sdf, min=0).sum()
            terms["col"] = col

        if "local" in active_terms and weights["local"] > 0:
            contact_losses = []
            for ti in range(prepared.n_frames):
                for side in hand_world:
                    sdf = _sdf_world(obj_grid, obj_rots[ti], obj["trans"][ti],
                                     obj["scale"], hand_world[side][ti])
                    contact_losses.append(_contact_from_values(
                        hand_world[side][ti], obj_dense_world[ti], sdf))
            terms["local"] = torch.stack(contact_losses).mean()

    return total_loss(terms, weights)


def _dense_surface(mesh, min_vertices: int = 256) -> np.ndarray:
    """Canonical surface samples: midpoint-subdivide coarse meshes until the
    faces are represented, not just the corners. No-op for dense meshes."""
    from .shapes import subdivide
    m = mesh
    while m.vertices.shape[0] < min_vertices:
        m = subdivide(m, 1)
    return np.ascontiguousarray(m.vertices, dtype=np.float64)


def _contact_from_values(hand_verts, obj_verts, sdf,
                         attract_m=None, repulse_m=None):
    from .losses import CONTACT_ATTRACT_M, CONTACT_REPULSE_M
    attract_m = attract_m or CONTACT_ATTRACT_M
    repulse_m = repulse_m or CONTACT_REPULSE_M
    # Exact pairwise differences: torch.cdist's matrix-multiply path has
    # cancellation noise that breaks finite-difference gradient checks.
    d_sq = ((hand_verts[:, None, :] - obj_verts[None, :, :]) ** 2) \
        .sum(dim=-1).min(dim=1).values
    attract = ((sdf > 0) & (sdf <= attract_m)).to(d_sq.dtype) * d_sq
    deep = sdf < -repulse_m
    repel_val = torch.where(deep, torch.full_like(d_sq, repulse_m**2), d_sq)
    repel = (sdf < 0).to(d_sq.dtype) * repel_val
    return (attract + repel).sum() / hand_verts.shape[0]


def fit_joint(initial: ClipState, clip: EvidenceClip, assets: SceneAssets,
              config: FitConfig, stage: str = "full") -> FitResult:
    """Two-stage Adam optimization of all per-frame poses plus shared scales.

    stage: "full" (coarse then full objective) or "coarse-only".
    """
    t_start = time.perf_counter()
    prepared = _PreparedClip(clip, assets, config)
    params = _Parameters(initial, config)
    trace: list[LossBreakdown] = []
    sdf_caches: dict = {}

    stages = [COARSE_TERMS] if stage == "coarse-only" else [COARSE_TERMS, FULL_TERMS]
    opt = None
    for active_terms in stages:
        if opt is None or not config.carry_adam_state:
            opt = torch.optim.Adam(params.groups(config),
                                   betas=config.adam_betas, eps=config.adam_eps)
        for step in range(config.steps_per_stage):
            opt.zero_grad()
            total, breakdown = evaluate_objective(
                params, prepared, assets, config, config.weights,
                active_terms, sdf_caches)
            if not np.isfinite(breakdown.total):
                bad = [k for k, v in breakdown.terms.items() if not np.isfinite(v)]
                raise DivergedFit(
                    f"non-finite loss at step {len(trace)}",
                    term=bad[0] if bad else "total", step=len(trace))
            if total.requires_grad:
                total.backward()
            opt.step()
            trace.append(breakdown)

    final = params.to_state(initial)
    ious = _final_ious(final, prepared, assets)
    return FitResult(state=final, trace=trace, mask_iou=ious,
                     wall_time=time.perf_counter() - t_start)


def _final_ious(state: ClipState, prepared: _PreparedClip,
                assets: SceneAssets) -> list[float]:
    obj = state.entities["object"]
    ious = []
    for ti in range(prepared.n_frames):
        world = pose_entity_np(assets.object_mesh.vertices, obj.state_at(ti))
        ious.append(_selection_iou(world, assets.object_mesh.faces, prepared.cam,
                                   prepared.raw_targets[ti],
                                   prepared.raw_occlusions[ti]))
    return ious


def pose_entity_np(vertices: np.ndarray, state: BodyState) -> np.ndarray:
    """Numpy convenience: scale * (R v) + D."""
    rot = rot6d_to_matrix(torch.from_numpy(state.rotation)).numpy()
    return state.scale * vertices @ rot.T + state.translation


def init_clip_state(clip: EvidenceClip, assets: SceneAssets,
                    config: FitConfig) -> ClipState:
    """Full initialization: hands from evidence, object from candidate
    rotations with silhouette refinement."""
    sides = sorted({s for f in clip.frames for s in f.hand_init})
    entities: dict[str, EntityTrack] = {}
    for side in sides:
        states = [init_hand(fr, assets.hand_models[side], clip.camera, side)
                  for fr in clip.frames]
        entities[side] = EntityTrack(
            kind=side,
            rot6d=np.stack([s.rotation for s in states]),
            translation=np.stack([s.translation for s in states]),
            theta=np.stack([s.theta for s in states]),
            scale=1.0)
    obj_states = init_object_motion(assets.object_mesh, clip, config)
    entities["object"] = EntityTrack(
        kind="object",
        rot6d=np.stack([s.rotation for s in obj_states]),
        translation=np.stack([s.translation for s in obj_states]),
        theta=None, scale=1.0,
        optimize_scale=config.approximate_object_model)
    return ClipState(entities=entities)
