"""Evidence ingestion and 2D box tracking.

Per-frame detections are associated into contiguous tracks with one
constant-velocity Kalman filter per track; frames without a matched
detection are filled with the filter prediction and flagged imputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .geometry import CameraIntrinsics
from .masks import MaskImage

KINDS = ("hand_left", "hand_right", "object")

IOU_THRESHOLD = 0.3
MAX_MISSED_FRAMES = 5
MIN_TRACK_LENGTH = 20

# Constant-velocity Kalman defaults (pixel units).
PROCESS_NOISE_VEL = 1e-2
MEASUREMENT_NOISE = 1.0
INITIAL_VEL_VAR = 10.0


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    score: float
    kind: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        if self.kind not in KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")


@dataclass
class HandInit:
    theta_init: np.ndarray       # (K,)
    rotation_init: np.ndarray    # (6,)
    vertices_2d: np.ndarray      # (V, 2) pixels

    def __post_init__(self):
        self.theta_init = np.asarray(self.theta_init, dtype=np.float64).reshape(-1)
        self.rotation_init = np.asarray(self.rotation_init, dtype=np.float64).reshape(6)
        self.vertices_2d = np.asarray(self.vertices_2d, dtype=np.float64).reshape(-1, 2)


@dataclass
class FrameEvidence:
    frame_index: int
    detections: list[Detection] = field(default_factory=list)
    object_mask: Optional[MaskImage] = None
    hand_masks: dict[str, MaskImage] = field(default_factory=dict)
    hand_init: dict[str, HandInit] = field(default_factory=dict)


@dataclass
class EvidenceClip:
    camera: CameraIntrinsics
    frames: list[FrameEvidence]

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class Track:
    kind: str
    start: int
    end: int                    # inclusive
    boxes: np.ndarray           # (end-start+1, 4)
    imputed: np.ndarray         # (end-start+1,) bool

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.imputed = np.asarray(self.imputed, dtype=bool).reshape(-1)
        if len(self.boxes) != self.end - self.start + 1:
            raise DimensionMismatch("track box count does not match frame range")

    def __len__(self) -> int:
        return self.end - self.start + 1

    def box_at(self, frame: int) -> Optional[np.ndarray]:
        if self.start <= frame <= self.end:
            return self.boxes[frame - self.start]
        return None


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def _box_to_z(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


def _z_to_box(z) -> np.ndarray:
    cx, cy, w, h = z[:4]
    w = max(w, 1e-6)
    h = max(h, 1e-6)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


class _KalmanTrack:
    """One track: constant-velocity filter over (cx, cy, w, h, vx, vy)."""

    F = np.eye(6)
    F[0, 4] = F[1, 5] = 1.0
    H = np.eye(4, 6)
    Q = np.diag([0.0, 0.0, 0.0, 0.0, PROCESS_NOISE_VEL, PROCESS_NOISE_VEL])
    R = MEASUREMENT_NOISE * np.eye(4)

    def __init__(self, kind: str, frame: int, box):
        self.kind = kind
        self.start = frame
        self.x = np.concatenate([_box_to_z(box), [0.0, 0.0]])
        self.P = np.diag([1.0, 1.0, 1.0, 1.0, INITIAL_VEL_VAR, INITIAL_VEL_VAR])
        self.boxes = [np.asarray(box, dtype=np.float64)]
        self.imputed = [False]
        self.missed = 0

    def predict(self) -> np.ndarray:
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        return _z_to_box(self.x)

    def update(self, box) -> None:
        z = _box_to_z(box)
        y = z - self.H @ self.x
        s = self.H @ self.P @ self.H.T + self.R
        k = self.P @ self.H.T @ np.linalg.inv(s)
        self.x = self.x + k @ y
        self.P = (np.eye(6) - k @ self.H) @ self.P

    def finish(self) -> Optional[Track]:
        # Trim trailing imputed frames: a track ends at its last match.
        n = len(self.boxes)
        while n > 0 and self.imputed[n - 1]:
            n -= 1
        if n == 0:
            return None
        return Track(kind=self.kind, start=self.start, end=self.start + n - 1,
                     boxes=np.stack(self.boxes[:n]), imputed=np.array(self.imputed[:n]))


def kalman_track(per_frame_detections: list[list[Detection]],
                 iou_threshold: float = IOU_THRESHOLD,
                 max_missed: int = MAX_MISSED_FRAMES) -> list[Track]:
    """Associate per-frame detections into tracks.

    Greedy highest-IoU matching of detections to track predictions (same
    kind, IoU above threshold); unmatched detections start new tracks;
    tracks unmatched for more than max_missed frames terminate. Gap frames
    carry the predicted box, flagged imputed.
    """
    active: list[_KalmanTrack] = []
    done: list[Track] = []
    for frame, dets in enumerate(per_frame_detections):
        preds = [t.predict() for t in active]
        pairs = []
        for ti, (t, pred) in enumerate(zip(active, preds)):
            for di, det in enumerate(dets):
                if det.kind != t.kind:
                    continue
                iou = box_iou(pred, det.box)
                if iou >= iou_threshold:
                    pairs.append((iou, ti, di))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        used_t: set[int] = set()
        used_d: set[int] = set()
        for iou, ti, di in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            active[ti].update(dets[di].box)
            active[ti].boxes.append(np.asarray(dets[di].box, dtype=np.float64))
            active[ti].imputed.append(False)
            active[ti].missed = 0
        survivors = []
        for ti, t in enumerate(active):
            if ti in used_t:
                survivors.append(t)
                continue
            t.missed += 1
            if t.missed > max_missed:
                finished = t.finish()
                if finished is not None:
                    done.append(finished)
            else:
                t.boxes.append(preds[ti])
                t.imputed.append(True)
                survivors.append(t)
        active = survivors
        for di, det in enumerate(dets):
            if di not in used_d:
                active.append(_KalmanTrack(det.kind, frame, det.box))
    for t in active:
        finished = t.finish()
        if finished is not None:
            done.append(finished)
    done.sort(key=lambda t: (t.start, t.kind))
    return done


def select_tracks(tracks: list[Track], min_len: int = MIN_TRACK_LENGTH) -> list[Track]:
    """Keep tracks spanning strictly more than min_len consecutive frames."""
    if min_len < 1:
        raise ValueError("min_len must be at least 1")
    return [t for t in tracks if len(t) > min_len]


def validate_frame(detections: list[Detection], expected: dict) -> list[Detection]:
    """Discard a frame's detections when they contradict the known scene.

    expected: {"sides": ["hand_right", ...], "object_present": bool}.
    Returns the detections unchanged if consistent, else an empty list
    (the tracker imputes the frame).
    """
    sides = expected.get("sides", [])
    object_present = expected.get("object_present", True)
    for side in ("hand_left", "hand_right"):
        want = sides.count(side)
        got = sum(1 for d in detections if d.kind == side)
        if got != want:
            return []
    n_obj = sum(1 for d in detections if d.kind == "object")
    if object_present and n_obj != 1:
        return []
    if not object_present and n_obj != 0:
        return []
    return detections


def load_evidence(path) -> EvidenceClip:
    """Read a clip's evidence JSON; mask PNG paths resolve relative to it."""
    path = Path(path)
    data = json.loads(path.read_text())
    cam = CameraIntrinsics.from_dict(data["camera"])
    frames = []
    for fr in data["frames"]:
        dets = [Detection(box=tuple(d["box"]), score=d["score"], kind=d["kind"])
                for d in fr.get("detections", [])]
        hand_init = {
            side: HandInit(theta_init=np.array(hi["theta_init"]),
                           rotation_init=np.array(hi["rotation_init"]),
                           vertices_2d=np.array(hi["vertices_2d"]))
            for side, hi in fr.get("hand_init", {}).items()}
        masks = fr.get("masks", {})
        object_mask = None
        hand_masks = {}
        for entity, rel in masks.items():
            m = MaskImage.load_png(path.parent / rel)
            if entity == "object":
                object_mask = m
            else:
                hand_masks[entity] = m
        frames.append(FrameEvidence(
            frame_index=int(fr["frame_index"]), detections=dets,
            object_mask=object_mask, hand_masks=hand_masks, hand_init=hand_init))
    frames.sort(key=lambda f: f.frame_index)
    return EvidenceClip(camera=cam, frames=frames)


def save_evidence(clip: EvidenceClip, path, mask_files: dict[int, dict[str, str]]) -> None:
    """Write the evidence JSON; mask_files maps frame_index -> entity -> relpath."""
    frames = []
    for fr in clip.frames:
        frames.append({
            "frame_index": fr.frame_index,
            "detections": [
                {"kind": d.kind, "score": d.score, "box": list(d.box)}
                for d in fr.detections],
            "hand_init": {
                side: {"theta_init": hi.theta_init.tolist(),
                       "rotation_init": hi.rotation_init.tolist(),
                       "vertices_2d": hi.vertices_2d.tolist()}
                for side, hi in fr.hand_init.items()},
            "masks": mask_files.get(fr.frame_index, {}),
        })
    payload = {"camera": clip.camera.to_dict(), "frames": frames}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def tracks_to_json(tracks: list[Track]) -> list[dict]:
    return [{
        "kind": t.kind, "start": t.start, "end": t.end,
        "boxes": t.boxes.tolist(), "imputed": t.imputed.tolist(),
    } for t in tracks]
