"""Pose sequence data model, on-disk formats and keypoint-format conversion.

On-disk sequence format: newline-delimited JSON, one sequence per line.
Fields: seq_id, subject, condition, view, frames. ``frames`` is a nested
array of shape (T, 17, 3) for raw sequences (x, y, confidence) or
(T, 17, 2) plus ``"unified": true`` for normalized sequences, which also
carry ``kept_frame_indices``. Numbers are plain decimal text, so files
are diffable and language-neutral.

Manifest format: one entry per line, ``path<TAB>role`` with role one of
train/gallery/probe. Paths are resolved relative to the manifest file.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, RecordError

NUM_KEYPOINTS = 17

CONDITIONS = ("NM", "BG", "CL", "WILD")
ROLES = ("train", "gallery", "probe")
PROTOCOLS = ("casiab", "oumvlp", "gait3d", "grew", "simple")

# COCO2017 keypoint order, fixed everywhere in this package.
COCO17_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

# 18-keypoint estimator layout (explicit neck at index 1):
# 0 nose, 1 neck, 2 r_shoulder, 3 r_elbow, 4 r_wrist, 5 l_shoulder,
# 6 l_elbow, 7 l_wrist, 8 r_hip, 9 r_knee, 10 r_ankle, 11 l_hip,
# 12 l_knee, 13 l_ankle, 14 r_eye, 15 l_eye, 16 r_ear, 17 l_ear.
# Entry i of the table below is the source index whose triple lands at
# COCO17 position i; the neck (source index 1) is dropped.
ALPHAPOSE18_TO_COCO17 = (0, 15, 14, 17, 16, 5, 2, 6, 3, 7, 4, 11, 8, 12, 9, 13, 10)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float

    def validate(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"non-finite keypoint coordinates ({self.x}, {self.y})")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class PoseFrame:
    """Exactly 17 keypoints in COCO2017 index order."""

    keypoints: tuple

    def __post_init__(self):
        if len(self.keypoints) != NUM_KEYPOINTS:
            raise DataError(
                f"frame has {len(self.keypoints)} keypoints, expected {NUM_KEYPOINTS}"
            )

    def coords(self) -> np.ndarray:
        """(17, 2) float array of x, y."""
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=np.float64)

    def confidences(self) -> np.ndarray:
        return np.array([k.confidence for k in self.keypoints], dtype=np.float64)


@dataclass
class PoseSequence:
    seq_id: str
    subject: str
    condition: str
    view: str
    frames: list  # list[PoseFrame], length >= 1

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise DataError(f"unknown condition {self.condition!r}")
        if len(self.frames) < 1:
            raise DataError(f"sequence {self.seq_id} has no frames")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def coords(self) -> np.ndarray:
        """(T, 17, 2) float array."""
        return np.stack([f.coords() for f in self.frames])


@dataclass
class DatasetManifest:
    entries: list  # list[tuple[str path, str role]]
    protocol: str = "simple"
    base_dir: str = "."

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise DataError(f"unknown protocol {self.protocol!r}")
        for path, role in self.entries:
            if role not in ROLES:
                raise DataError(f"unknown role {role!r} for {path}")


@dataclass
class ValidationIssue:
    frame_index: int  # -1 for sequence-level issues
    kind: str
    detail: str = ""


@dataclass
class ValidationReport:
    seq_id: str
    issues: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def _frame_from_triples(triples, path="<memory>", line_no=0) -> PoseFrame:
    if len(triples) != NUM_KEYPOINTS:
        raise RecordError(
            path, line_no,
            f"frame has {len(triples)} keypoints, expected {NUM_KEYPOINTS}",
        )
    kps = []
    for t in triples:
        if len(t) != 3:
            raise RecordError(path, line_no, f"keypoint has {len(t)} fields, expected 3")
        kps.append(Keypoint(float(t[0]), float(t[1]), float(t[2])))
    return PoseFrame(tuple(kps))


def sequence_to_record(seq: PoseSequence) -> dict:
    frames = [[[k.x, k.y, k.confidence] for k in f.keypoints] for f in seq.frames]
    return {
        "seq_id": seq.seq_id,
        "subject": seq.subject,
        "condition": seq.condition,
        "view": seq.view,
        "frames": frames,
    }


def sequence_from_record(rec: dict, path="<memory>", line_no=0) -> PoseSequence:
    try:
        frames = [
            _frame_from_triples(f, path, line_no) for f in rec["frames"]
        ]
        return PoseSequence(
            seq_id=str(rec["seq_id"]),
            subject=str(rec["subject"]),
            condition=str(rec["condition"]),
            view=str(rec["view"]),
            frames=frames,
        )
    except KeyError as e:
        raise RecordError(path, line_no, f"missing field {e.args[0]!r}") from e


def save_sequences(path, sequences):
    """Write sequences as one JSON record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_record(seq)) + "\n")


def load_sequence_file(path) -> list:
    if not os.path.exists(path):
        raise DataError(f"missing sequence file: {path}")
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(path, line_no, f"invalid JSON: {e.msg}") from e
            out.append(sequence_from_record(rec, path, line_no))
    return out


def load_manifest(path) -> DatasetManifest:
    if not os.path.exists(path):
        raise DataError(f"missing manifest file: {path}")
    entries = []
    protocol = "simple"
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if line.startswith("protocol\t"):
                protocol = line.split("\t", 1)[1].strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise RecordError(path, line_no, "expected 'path<TAB>role'")
            entries.append((parts[0], parts[1]))
    return DatasetManifest(entries=entries, protocol=protocol,
                           base_dir=os.path.dirname(os.path.abspath(path)))


def save_manifest(path, manifest: DatasetManifest):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"protocol\t{manifest.protocol}\n")
        for entry_path, role in manifest.entries:
            fh.write(f"{entry_path}\t{role}\n")


def load_sequences_with_roles(manifest: DatasetManifest):
    """Load every sequence referenced by the manifest, in manifest order.

    Returns a list of (PoseSequence, role) pairs.
    """
    out = []
    for entry_path, role in manifest.entries:
        path = entry_path
        if not os.path.isabs(path):
            path = os.path.join(manifest.base_dir, path)
        for seq in load_sequence_file(path):
            out.append((seq, role))
    return out


def load_sequences(manifest: DatasetManifest):
    """All sequences referenced by the manifest, in manifest order."""
    return [seq for seq, _role in load_sequences_with_roles(manifest)]


def convert_alphapose18_to_coco17(frame18) -> PoseFrame:
    """Reorder an 18-keypoint frame (explicit neck) into COCO2017 order.

    The neck triple is dropped; the other 17 triples are copied unchanged.
    """
    if len(frame18) != 18:
        raise DataError(f"expected 18 keypoints, got {len(frame18)}")
    kps = []
    for src in ALPHAPOSE18_TO_COCO17:
        k = frame18[src]
        if isinstance(k, Keypoint):
            kps.append(k)
        else:
            kps.append(Keypoint(float(k[0]), float(k[1]), float(k[2])))
    return PoseFrame(tuple(kps))


def validate_sequence(seq: PoseSequence, min_frames: int = 1,
                      min_extent: float = 1e-6) -> ValidationReport:
    """Report-only checks: non-finite coordinates, degenerate vertical
    extent, and sequences shorter than min_frames."""
    report = ValidationReport(seq_id=seq.seq_id)
    if seq.num_frames < min_frames:
        report.issues.append(ValidationIssue(
            -1, "too_short", f"{seq.num_frames} < {min_frames} frames"))
    for i, frame in enumerate(seq.frames):
        coords = frame.coords()
        if not np.isfinite(coords).all():
            report.issues.append(ValidationIssue(i, "non_finite"))
            continue
        extent = float(coords[:, 1].max() - coords[:, 1].min())
        if extent < min_extent:
            report.issues.append(ValidationIssue(
                i, "degenerate_extent", f"extent {extent:g} < {min_extent:g}"))
    return report
