"""Command-line entry points.

Subcommands:
  synth  generate a synthetic scene directory with exact ground truth
  track  associate per-frame detections from an evidence file into tracks
  fit    initialize and optimize hand+object poses for a scene, writing
         the fitted states, a per-step loss trace CSV, posed meshes and
         figure reports (mask overlays, loss curves)
  eval   compare fitted states against ground truth and write a metrics
         report plus per-frame metric plots

Exit codes: 0 success, 2 invalid input or configuration, 3 bad data
(e.g. a non-watertight mesh), 4 diverged optimization.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import viz
from .errors import (
    ConfigError,
    DivergedFit,
    GraspFitError,
    NotWatertight,
)
from .fitting import (
    ClipState,
    FitConfig,
    SceneAssets,
    fit_joint,
    init_clip_state,
    pose_entity_np,
)
from .geometry import TriMesh
from .hand import ParametricHandModel, hand_joints, hand_vertices
from .losses import TERM_NAMES, LossWeights
from .masks import MaskImage, union
from .metrics import (
    add_s,
    aligned_error,
    contact_accuracy,
    contact_flag,
    contact_percentage,
    f_score,
    penetration_depth,
    surface_points,
    vertex_mean_distance,
)
from .render import hard_silhouette, mask_iou
from .sdf import build_sdf_grid
from .synth import generate_clip, make_scene_spec
from .tracking import kalman_track, load_evidence, tracks_to_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")


def _parse_overrides(pairs: list[str]) -> dict[str, float]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"weight override must be key=value, got {pair!r}")
        key, _, val = pair.partition("=")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ConfigError(f"weight override value must be a number: {pair!r}")
    return out


def _fit_config(args) -> FitConfig:
    """Build the fit configuration: defaults, then the config file, then
    command-line flags (highest precedence)."""
    d = _load_json(args.config) if args.config else {}
    config = FitConfig.from_dict(d)
    if args.seed is not None:
        config.rng_seed = args.seed
    if args.weights_override:
        config.weights = config.weights.replace(
            **{f"lambda_{k}" if not k.startswith("lambda_") else k: v
               for k, v in _parse_overrides(args.weights_override).items()})
    return config


def cmd_synth(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    spec = make_scene_spec(**overrides)
    if args.seed is not None:
        spec["seed"] = args.seed
    out = generate_clip(spec, args.out)
    print(f"wrote scene to {out}")
    return EXIT_OK


def cmd_track(args) -> int:
    clip = load_evidence(args.evidence)
    tracks = kalman_track([f.detections for f in clip.frames])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"tracks": tracks_to_json(tracks)}, sort_keys=True))
    print(f"{len(tracks)} tracks -> {out}")
    return EXIT_OK


def _load_assets(scene_dir: Path) -> SceneAssets:
    mesh = TriMesh.load_obj(scene_dir / "meshes" / "object.obj")
    hands = {p.stem: ParametricHandModel.load(p)
             for p in sorted((scene_dir / "meshes").glob("hand_*.npz"))}
    if not hands:
        raise ConfigError(f"no hand models under {scene_dir / 'meshes'}")
    return SceneAssets(hand_models=hands, object_mesh=mesh)


def _entity_world_np(state: ClipState, assets: SceneAssets, name: str,
                     t: int) -> np.ndarray:
    ent = state.entities[name]
    if name == "object":
        verts = assets.object_mesh.vertices
    else:
        with torch.no_grad():
            verts = hand_vertices(assets.hand_models[name],
                                  torch.from_numpy(ent.theta[t])).numpy()
    return pose_entity_np(verts, ent.state_at(t))


def _write_trace_csv(trace, path: Path, steps_per_stage: int) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "stage", *TERM_NAMES, "total"])
        for i, b in enumerate(trace):
            stage = "coarse" if i < steps_per_stage else "full"
            writer.writerow([i, stage] + [f"{v:.10g}" for v in b.as_row()])


def cmd_fit(args) -> int:
    torch.set_num_threads(max(1, args.jobs))
    config = _fit_config(args)

    scene_dir = Path(args.scene)
    clip = load_evidence(scene_dir / "evidence.json")
    assets = _load_assets(scene_dir)

    initial = init_clip_state(clip, assets, config)
    result = fit_joint(initial, clip, assets, config, stage=args.stage)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "meshes").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)

    payload = {
        "clip_state": result.state.to_dict(),
        "camera": clip.camera.to_dict(),
        "config": config.to_dict(),
        "mask_iou": result.mask_iou,
        "stage": args.stage,
    }
    (out / "result_states.json").write_text(json.dumps(payload, sort_keys=True))
    _write_trace_csv(result.trace, out / "loss_trace.csv", config.steps_per_stage)
    viz.save_loss_curves(result.trace, config.steps_per_stage, out / "loss_curves.png")

    cam = clip.camera
    faces = {name: (assets.object_mesh.faces if name == "object"
                    else assets.hand_models[name].faces.astype(np.int64))
             for name in result.state.entities}
    for t, frame in enumerate(clip.frames):
        rendered = MaskImage.zeros(cam.width, cam.height)
        hand_renders = []
        for name in sorted(result.state.entities):
            world = _entity_world_np(result.state, assets, name, t)
            TriMesh(world, faces[name]).save_obj(
                out / "meshes" / f"frame_{t:04d}_{name}.obj")
            sil = hard_silhouette(world, faces[name], cam, (cam.width, cam.height))
            if name == "object":
                rendered = sil
            else:
                hand_renders.append(sil)
        target = frame.object_mask or MaskImage.zeros(cam.width, cam.height)
        occlusion = union(list(frame.hand_masks.values()) or hand_renders,
                          cam.width, cam.height)
        viz.save_overlay(target, rendered, occlusion,
                         out / "overlays" / f"frame_{t:04d}.png",
                         title=f"frame {t}  IoU {result.mask_iou[t]:.3f}")

    print(f"fit done in {result.wall_time:.1f}s, "
          f"mean object IoU {float(np.mean(result.mask_iou)):.3f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    result = _load_json(Path(args.result) / "result_states.json"
                        if Path(args.result).is_dir() else Path(args.result))
    pred = ClipState.from_dict(result["clip_state"])

    scene_dir = Path(args.scene)
    gt_raw = _load_json(scene_dir / "gt_states.json")
    gt = ClipState.from_dict(gt_raw["clip_state"])
    gt_contact = gt_raw.get("contact")
    assets = _load_assets(scene_dir)

    if pred.n_frames != gt.n_frames:
        raise ConfigError(
            f"frame count mismatch: fitted {pred.n_frames}, ground truth {gt.n_frames}")
    missing = set(gt.entities) - set(pred.entities)
    if missing:
        raise ConfigError(f"fitted state missing entities {sorted(missing)}")

    obj_pts_canonical = surface_points(assets.object_mesh)
    obj_sdf = build_sdf_grid(assets.object_mesh)

    per_frame: dict[str, list[float]] = {
        "object_mvd_m": [], "object_add_s_m": [],
        "object_f5mm": [], "object_f15mm": [],
        "hand_mvd_m": [], "hand_mvd_procrustes_m": [],
        "hand_mpjpe_m": [], "penetration_m": [],
    }
    flags = []
    for t in range(gt.n_frames):
        po = pose_entity_np(obj_pts_canonical, pred.entities["object"].state_at(t))
        go = pose_entity_np(obj_pts_canonical, gt.entities["object"].state_at(t))
        per_frame["object_mvd_m"].append(vertex_mean_distance(po, go))
        per_frame["object_add_s_m"].append(add_s(po, go))
        per_frame["object_f5mm"].append(f_score(po, go, 0.005))
        per_frame["object_f15mm"].append(f_score(po, go, 0.015))

        hand_mvd, hand_pro, hand_jnt, pen = [], [], [], []
        in_contact = False
        for side in sorted(gt.hands()):
            model = assets.hand_models[side]
            ph = _entity_world_np(pred, assets, side, t)
            gh = _entity_world_np(gt, assets, side, t)
            hand_mvd.append(vertex_mean_distance(ph, gh))
            hand_pro.append(aligned_error(ph, gh, mode="procrustes"))
            with torch.no_grad():
                pj = hand_joints(model, hand_vertices(model, torch.from_numpy(
                    pred.entities[side].theta[t]))).numpy()
                gj = hand_joints(model, hand_vertices(model, torch.from_numpy(
                    gt.entities[side].theta[t]))).numpy()
            pj = pose_entity_np(pj, pred.entities[side].state_at(t))
            gj = pose_entity_np(gj, gt.entities[side].state_at(t))
            hand_jnt.append(vertex_mean_distance(pj, gj))

            obj_state = pred.entities["object"].state_at(t)
            from .synth import _to_object_frame
            local = _to_object_frame(ph, obj_state)
            pen.append(penetration_depth(local, obj_sdf))
            in_contact = in_contact or contact_flag(local, obj_sdf)
        per_frame["hand_mvd_m"].append(float(np.mean(hand_mvd)))
        per_frame["hand_mvd_procrustes_m"].append(float(np.mean(hand_pro)))
        per_frame["hand_mpjpe_m"].append(float(np.mean(hand_jnt)))
        per_frame["penetration_m"].append(float(np.max(pen)))
        flags.append(in_contact)

    aggregate = {k: float(np.mean(v)) for k, v in per_frame.items()}
    aggregate["contact_percentage"] = contact_percentage(flags)
    if gt_contact is not None and len(gt_contact) == len(flags):
        aggregate["contact_accuracy"] = contact_accuracy(flags, gt_contact)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"per_frame": per_frame, "aggregate": aggregate,
              "contact_flags": [bool(f) for f in flags], "n_frames": gt.n_frames}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True))
    viz.save_metric_curves(per_frame, out / "metrics_per_frame.png")
    print(json.dumps(aggregate, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspfit",
        description="Hand+object pose fitting from tracked video evidence.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--config", help="scene spec JSON (overrides defaults)")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track detections from an evidence file")
    p.add_argument("--evidence", required=True, help="evidence JSON path")
    p.add_argument("--out", required=True, help="output tracks JSON path")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("fit", help="fit poses to a scene directory")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--config", help="fit config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads; 1 gives deterministic output")
    p.add_argument("--stage", choices=["coarse-only", "full"], default="full")
    p.add_argument("--weights-override", nargs="*", default=[],
                   metavar="TERM=VALUE",
                   help="loss weight overrides, e.g. col=0 local=2.5")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score fitted states against ground truth")
    p.add_argument("--result", required=True,
                   help="fit output directory or result_states.json")
    p.add_argument("--scene", required=True, help="scene directory with ground truth")
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedFit as e:
        print(f"error: optimization diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except NotWatertight as e:
        print(f"error: bad mesh data: {e}", file=sys.stderr)
        return EXIT_DATA
    except GraspFitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
