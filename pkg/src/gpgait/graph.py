"""Skeleton graph construction: adjacency subsets and partition masks.

Adjacency is split into three spatial-configuration subsets following
the usual skeleton-GCN convention: self-loops, neighbors closer to the
skeleton barycenter ("centripetal") and neighbors farther from it
("centrifugal"). Distances are measured on a fixed canonical upright
pose; equal-distance neighbors go to the centripetal subset. Each
subset is column-normalized so nonzero columns sum to one.

Partition masks are 17x17 binary matrices that are 1 exactly when two
joints share a body-part group. The configured schemes range from five
small parts up to the all-ones global mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .hod import PARENT

V = 17

# Undirected skeleton edges: the bone-tree edges (child, parent).
EDGES = tuple((child, parent) for child, parent in enumerate(PARENT) if child != parent)

# Canonical upright pose used only to rank joints by barycenter
# distance (x rightward, y downward, neck at origin, arbitrary units).
CANONICAL_POSE = np.array([
    (0.0, -20.0),    # 0 nose
    (4.0, -24.0),    # 1 left eye
    (-4.0, -24.0),   # 2 right eye
    (8.0, -21.0),    # 3 left ear
    (-8.0, -21.0),   # 4 right ear
    (18.0, 0.0),     # 5 left shoulder
    (-18.0, 0.0),    # 6 right shoulder
    (22.0, 26.0),    # 7 left elbow
    (-22.0, 26.0),   # 8 right elbow
    (24.0, 50.0),    # 9 left wrist
    (-24.0, 50.0),   # 10 right wrist
    (12.0, 50.0),    # 11 left hip
    (-12.0, 50.0),   # 12 right hip
    (13.0, 92.0),    # 13 left knee
    (-13.0, 92.0),   # 14 right knee
    (14.0, 134.0),   # 15 left ankle
    (-14.0, 134.0),  # 16 right ankle
], dtype=np.float64)

PARTS5 = {
    "head": (0, 1, 2, 3, 4),
    "left_arm": (5, 7, 9),
    "right_arm": (6, 8, 10),
    "left_leg": (11, 13, 15),
    "right_leg": (12, 14, 16),
}

PARTITION_SCHEMES = {
    "parts5": tuple(PARTS5.values()),
    "upper_lower": (
        (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10),
        (11, 12, 13, 14, 15, 16),
    ),
    "three_groups": (
        (0, 1, 2, 3, 4),
        (5, 6, 7, 8, 9, 10),
        (11, 12, 13, 14, 15, 16),
    ),
    "left_right": (
        (0, 1, 2, 3, 4),
        (5, 7, 9, 11, 13, 15),
        (6, 8, 10, 12, 14, 16),
    ),
    "global": (tuple(range(V)),),
}


@dataclass(frozen=True)
class SkeletonTopology:
    num_joints: int = V
    edges: tuple = EDGES
    parent: tuple = PARENT


@dataclass(frozen=True)
class PartitionScheme:
    name: str
    groups: tuple

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            overlap = seen.intersection(g)
            if overlap:
                raise ConfigError(
                    f"scheme {self.name!r}: joints {sorted(overlap)} in multiple groups")
            seen.update(g)
        if seen != set(range(V)):
            missing = sorted(set(range(V)) - seen)
            raise ConfigError(f"scheme {self.name!r}: joints {missing} uncovered")


def named_scheme(name: str) -> PartitionScheme:
    if name not in PARTITION_SCHEMES:
        raise ConfigError(f"unknown partition scheme {name!r}")
    return PartitionScheme(name=name, groups=PARTITION_SCHEMES[name])


def build_partition_mask(scheme: PartitionScheme) -> np.ndarray:
    """17x17 binary mask: 1 iff two joints share a group."""
    mask = np.zeros((V, V), dtype=np.float64)
    for g in scheme.groups:
        ix = np.asarray(g)
        mask[np.ix_(ix, ix)] = 1.0
    return mask


def mask_set(names=("parts5", "upper_lower", "three_groups", "left_right", "global")):
    return {name: build_partition_mask(named_scheme(name)) for name in names}


def _column_normalize(mat: np.ndarray) -> np.ndarray:
    out = mat.copy()
    colsum = out.sum(axis=0)
    nz = colsum > 0
    out[:, nz] = out[:, nz] / colsum[nz]
    return out


def build_adjacency_subsets(topology: SkeletonTopology = None) -> np.ndarray:
    """(3, 17, 17) stack: self-loops, centripetal, centrifugal; each
    column-normalized. Before normalization the subsets sum to
    identity + symmetric adjacency."""
    if topology is None:
        topology = SkeletonTopology()
    n = topology.num_joints
    barycenter = CANONICAL_POSE.mean(axis=0)
    dist = np.linalg.norm(CANONICAL_POSE - barycenter, axis=1)

    identity = np.eye(n)
    centripetal = np.zeros((n, n))
    centrifugal = np.zeros((n, n))
    for a, b in topology.edges:
        for u, v in ((a, b), (b, a)):
            # entry (v, u): contribution of neighbor v to node u
            if dist[v] <= dist[u]:
                centripetal[v, u] = 1.0
            else:
                centrifugal[v, u] = 1.0

    return np.stack([
        _column_normalize(identity),
        _column_normalize(centripetal),
        _column_normalize(centrifugal),
    ])


def skeleton_adjacency(topology: SkeletonTopology = None) -> np.ndarray:
    """Symmetric 0/1 adjacency of the skeleton edges, no self-loops."""
    if topology is None:
        topology = SkeletonTopology()
    adj = np.zeros((topology.num_joints, topology.num_joints))
    for a, b in topology.edges:
        adj[a, b] = 1.0
        adj[b, a] = 1.0
    return adj
