"""Geometric descriptors computed from unified poses: bone vectors and
inner/peripheral joint angles.

The bone tree is rooted at the nose; every other joint has exactly one
parent, and a joint's bone vector points from its parent to itself. The
root's bone is the zero vector.

Angle roles: torso-adjacent joints (shoulders, elbows, hips, knees) get
an inner angle, the triangle angle at the joint between two named
neighbor joints, computed from side lengths. Extremity and head joints
get a peripheral angle, the slant of the bone to their parent against
the vertical, in (-pi/2, pi/2].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hot import UnifiedPoseSequence

NUM_KEYPOINTS = 17

# parent[i] is the tree parent of joint i; the nose (0) is the root.
PARENT = (0, 0, 0, 1, 2, 0, 0, 5, 6, 7, 8, 5, 6, 11, 12, 13, 14)

# Inner joints with their triangle (left neighbor, self, right neighbor).
INNER_TRIANGLES = {
    5: (7, 5, 11),
    6: (8, 6, 12),
    7: (5, 7, 9),
    8: (6, 8, 10),
    11: (5, 11, 13),
    12: (6, 12, 14),
    13: (11, 13, 15),
    14: (12, 14, 16),
}

PERIPHERAL_JOINTS = (0, 1, 2, 3, 4, 9, 10, 15, 16)


@dataclass(frozen=True)
class AngleRole:
    """Role of one joint: 'inner' with a triangle or 'peripheral' with
    its parent as adjacency."""

    kind: str
    triangle: tuple = None  # (left, self, right), inner only
    adjacent: int = None    # parent index, peripheral only


def default_angle_roles() -> tuple:
    roles = [None] * NUM_KEYPOINTS
    for j, tri in INNER_TRIANGLES.items():
        roles[j] = AngleRole(kind="inner", triangle=tri)
    for j in PERIPHERAL_JOINTS:
        roles[j] = AngleRole(kind="peripheral", adjacent=PARENT[j])
    assert all(r is not None for r in roles)
    return tuple(roles)


ANGLE_ROLES = default_angle_roles()


@dataclass
class DescriptorSet:
    joint: np.ndarray  # (T, 17, 2)
    bone: np.ndarray   # (T, 17, 2)
    angle: np.ndarray  # (T, 17, 1)
    warnings: list = field(default_factory=list)


def compute_bones(coords: np.ndarray, parent=PARENT) -> np.ndarray:
    """Per-joint vector from its tree parent; root bone is zero."""
    parents = np.asarray(parent)
    bones = coords - coords[parents]
    bones[0] = 0.0
    return bones


def _fold_halfturn(theta: float) -> float:
    # map into (-pi/2, pi/2]
    if theta > np.pi / 2:
        theta -= np.pi
    elif theta <= -np.pi / 2:
        theta += np.pi
    return theta


def compute_angles(coords: np.ndarray, roles=ANGLE_ROLES):
    """(17,) angle vector plus a list of zero-length-side warnings.

    Inner angles use the law of cosines with the argument clamped to
    [-1, 1]; a zero-length adjacent side yields angle 0 with a warning
    instead of an error.
    """
    angles = np.zeros(NUM_KEYPOINTS, dtype=np.float64)
    warnings = []
    for j, role in enumerate(roles):
        if role.kind == "inner":
            left, mid, right = role.triangle
            s_l = float(np.linalg.norm(coords[mid] - coords[left]))
            s_r = float(np.linalg.norm(coords[mid] - coords[right]))
            s_opp = float(np.linalg.norm(coords[left] - coords[right]))
            if s_l == 0.0 or s_r == 0.0:
                warnings.append(f"joint {j}: zero-length adjacent side")
                angles[j] = 0.0
                continue
            arg = (s_l * s_l + s_r * s_r - s_opp * s_opp) / (2.0 * s_l * s_r)
            angles[j] = float(np.arccos(np.clip(arg, -1.0, 1.0)))
        else:
            adj = coords[role.adjacent]
            dx = float(coords[j, 0] - adj[0])
            dy = float(coords[j, 1] - adj[1])
            if dx == 0.0 and dy == 0.0:
                angles[j] = 0.0
            else:
                angles[j] = _fold_halfturn(float(np.arctan2(dx, dy)))
    return angles, warnings


def build_descriptors(useq: UnifiedPoseSequence,
                      roles=ANGLE_ROLES, parent=PARENT) -> DescriptorSet:
    """Joint/bone/angle tensors for every frame of a unified sequence."""
    frames = useq.frames
    bones = np.stack([compute_bones(f, parent) for f in frames])
    angle_rows = []
    warn_all = []
    for t, f in enumerate(frames):
        ang, warns = compute_angles(f, roles)
        angle_rows.append(ang)
        warn_all.extend(f"frame {t}: {w}" for w in warns)
    angles = np.stack(angle_rows)[..., None]
    return DescriptorSet(
        joint=frames.copy(),
        bone=bones,
        angle=angles,
        warnings=warn_all,
    )


def descriptors_from_frames(frames: np.ndarray) -> DescriptorSet:
    """Same as build_descriptors but straight from a (T, 17, 2) array."""
    fake = UnifiedPoseSequence(
        seq_id="", subject="", condition="NM", view="",
        frames=np.asarray(frames, dtype=np.float64),
        kept_frame_indices=list(range(len(frames))),
    )
    return build_descriptors(fake)
