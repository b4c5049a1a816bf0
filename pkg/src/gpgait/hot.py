"""Unified pose normalization: de-slant, body rescale, neck-origin alignment.

Coordinates follow the image convention (x rightward, y downward). Every
frame is processed independently: a virtual neck/hip pair defines the
spine, a rotation about the neck removes slants beyond the threshold,
the skeleton is rescaled to a fixed vertical extent, and finally all
joints are expressed relative to the (recomputed) neck so the unified
origin sits exactly at the neck.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DegenerateFrameError,
    DegenerateSpineError,
    EmptySequenceError,
)
from .pose_io import PoseSequence

# COCO indices used for the virtual joints.
L_SHOULDER, R_SHOULDER = 5, 6
L_HIP, R_HIP = 11, 12

DEFAULT_HEIGHT = 225.0
DEFAULT_SLANT_THRESHOLD = 0.1  # radians


@dataclass(frozen=True)
class HotConfig:
    h_unif: float = DEFAULT_HEIGHT
    phi: float = DEFAULT_SLANT_THRESHOLD
    epsilon_extent: float = None  # defaults to 1e-6 * h_unif

    def __post_init__(self):
        if self.h_unif <= 0:
            raise DataError(f"h_unif must be positive, got {self.h_unif}")
        if self.phi < 0:
            raise DataError(f"phi must be nonnegative, got {self.phi}")
        if self.epsilon_extent is None:
            object.__setattr__(self, "epsilon_extent", 1e-6 * self.h_unif)
        if self.epsilon_extent <= 0:
            raise DataError("epsilon_extent must be positive")


@dataclass(frozen=True)
class VirtualJoints:
    neck: tuple  # (x, y)
    hip: tuple


@dataclass
class UnifiedPoseSequence:
    seq_id: str
    subject: str
    condition: str
    view: str
    frames: np.ndarray  # (T, 17, 2) aligned coordinates
    kept_frame_indices: list

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def compute_virtual_joints(coords: np.ndarray) -> VirtualJoints:
    """Neck = shoulder midpoint, hip = hip midpoint, from (17, 2) coords."""
    if not np.isfinite(coords).all():
        raise DataError("non-finite coordinates in frame")
    neck = (coords[L_SHOULDER] + coords[R_SHOULDER]) / 2.0
    hip = (coords[L_HIP] + coords[R_HIP]) / 2.0
    return VirtualJoints(neck=(float(neck[0]), float(neck[1])),
                         hip=(float(hip[0]), float(hip[1])))


def compute_rotation_angle(vj: VirtualJoints) -> float:
    """Spine slant angle in (-pi/2, pi/2]; zero for a vertical spine.

    The angle is arctan(dx / dy) with dx = neck_x - hip_x and
    dy = neck_y - hip_y, folded into (-pi/2, pi/2]. A horizontal spine
    (dy == 0 with dx != 0) or coincident neck/hip is degenerate.
    """
    dx = vj.neck[0] - vj.hip[0]
    dy = vj.neck[1] - vj.hip[1]
    if dx == 0.0 and dy == 0.0:
        raise DegenerateSpineError("neck coincides with hip", coincident=True)
    if dx == 0.0:
        return 0.0
    if dy == 0.0:
        raise DegenerateSpineError("horizontal spine (neck_y == hip_y)")
    theta = math.atan2(dx, dy)
    if theta > math.pi / 2:
        theta -= math.pi
    elif theta <= -math.pi / 2:
        theta += math.pi
    return theta


def affine_transform(coords: np.ndarray, vj: VirtualJoints, theta: float,
                     phi: float) -> np.ndarray:
    """Rotate the frame by theta about the neck when |theta| >= phi.

    Below the threshold the input is returned unchanged. The neck is a
    fixed point of the rotation, so the post-transform spine is vertical
    up to floating-point error.
    """
    if abs(theta) < phi:
        return coords.copy()
    c, s = math.cos(theta), math.sin(theta)
    n = np.array(vj.neck, dtype=np.float64)
    rel = coords - n
    rot = np.empty_like(rel)
    rot[:, 0] = c * rel[:, 0] - s * rel[:, 1]
    rot[:, 1] = s * rel[:, 0] + c * rel[:, 1]
    return rot + n


def body_rescale(coords: np.ndarray, h_unif: float,
                 epsilon_extent: float) -> np.ndarray:
    """Scale all coordinates so the frame's vertical extent equals h_unif."""
    extent = float(coords[:, 1].max() - coords[:, 1].min())
    if extent < epsilon_extent:
        raise DegenerateFrameError(
            f"vertical extent {extent:g} below {epsilon_extent:g}")
    return coords * (h_unif / extent)


def body_align(coords: np.ndarray, neck: np.ndarray = None) -> np.ndarray:
    """Translate so the virtual neck sits exactly at the origin.

    With an explicit neck this is a plain subtraction. Without one the
    translation is computed as the average of the two per-shoulder
    differences: float subtraction is antisymmetric, so the recomputed
    shoulder midpoint of the result is exactly (0, 0), which a rounded
    midpoint subtraction cannot guarantee.
    """
    if neck is not None:
        return coords - np.asarray(neck, dtype=np.float64)
    return 0.5 * (coords - coords[L_SHOULDER]) + 0.5 * (coords - coords[R_SHOULDER])


def unify_frame(coords: np.ndarray, cfg: HotConfig) -> np.ndarray:
    """Full per-frame pipeline: virtual joints -> slant -> rescale -> align.

    Raises for frames that must be dropped. A coincident neck/hip is
    tolerated by skipping the rotation; a horizontal spine is not.
    """
    vj = compute_virtual_joints(coords)
    try:
        theta = compute_rotation_angle(vj)
    except DegenerateSpineError as e:
        if not e.coincident:
            raise
        theta = 0.0  # prefer keeping the frame; rotation is skipped
    coords = affine_transform(coords, vj, theta, cfg.phi)
    coords = body_rescale(coords, cfg.h_unif, cfg.epsilon_extent)
    return body_align(coords)


def apply_hot(seq: PoseSequence, cfg: HotConfig = None) -> UnifiedPoseSequence:
    """Normalize a whole sequence, dropping degenerate frames."""
    if cfg is None:
        cfg = HotConfig()
    frames = []
    kept = []
    for i, frame in enumerate(seq.frames):
        coords = frame.coords()
        try:
            frames.append(unify_frame(coords, cfg))
        except (DegenerateFrameError, DegenerateSpineError, DataError):
            continue
        kept.append(i)
    if not frames:
        raise EmptySequenceError(
            f"sequence {seq.seq_id}: every frame degenerate")
    return UnifiedPoseSequence(
        seq_id=seq.seq_id,
        subject=seq.subject,
        condition=seq.condition,
        view=seq.view,
        frames=np.stack(frames),
        kept_frame_indices=kept,
    )


def passthrough(seq: PoseSequence) -> UnifiedPoseSequence:
    """Copy raw coordinates without normalization (ablation path)."""
    return UnifiedPoseSequence(
        seq_id=seq.seq_id,
        subject=seq.subject,
        condition=seq.condition,
        view=seq.view,
        frames=seq.coords(),
        kept_frame_indices=list(range(seq.num_frames)),
    )


def save_unified(path, sequences):
    """Unified sequences in the shared record format, marked and without
    a confidence channel."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in sequences:
            rec = {
                "seq_id": u.seq_id,
                "subject": u.subject,
                "condition": u.condition,
                "view": u.view,
                "unified": True,
                "kept_frame_indices": list(u.kept_frame_indices),
                "frames": u.frames.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_unified(path) -> list:
    if not os.path.exists(path):
        raise DataError(f"missing unified sequence file: {path}")
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if not rec.get("unified"):
                raise DataError(f"{path}: record is not a unified sequence")
            out.append(UnifiedPoseSequence(
                seq_id=str(rec["seq_id"]),
                subject=str(rec["subject"]),
                condition=str(rec["condition"]),
                view=str(rec["view"]),
                frames=np.asarray(rec["frames"], dtype=np.float64),
                kept_frame_indices=list(rec["kept_frame_indices"]),
            ))
    return out
