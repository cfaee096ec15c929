"""Trajectory file formats and sequence manifests.

Two pose file formats are supported:

* TUM: one `t tx ty tz qx qy qz qw` line per pose, `#` comments allowed.
* KITTI odometry: 12 scalars per line forming a row-major 3x4 pose matrix;
  timestamps are synthesized as the line index in seconds (the format carries
  none and evaluation only needs ordering).

Parsing is total: every input either yields a Trajectory or raises a
positioned error. Ground-truth files carry rounding noise, so quaternions are
renormalized and rotation blocks re-orthonormalized on ingest behind a 1e-3
acceptance gate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .geometry import Rigid3, Trajectory, matrix_to_quat, quat_to_matrix


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonMonotonic(ParseError):
    def __init__(self, line: int, message: str = "timestamp not strictly increasing"):
        super().__init__(line, message)


def _lines(stream: IO[str] | str | Iterable[str]) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def parse_tum(stream) -> Trajectory:
    """Parse a TUM-format pose file from a text stream or string."""
    entries: list[tuple[float, Rigid3]] = []
    prev_t = -math.inf
    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(lineno, f"expected 8 fields, got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
        t, tx, ty, tz, qx, qy, qz, qw = vals
        if t <= prev_t:
            raise NonMonotonic(lineno)
        prev_t = t
        norm = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if abs(norm - 1.0) > 1e-3:
            raise ParseError(lineno, f"quaternion norm {norm:.6f} outside 1e-3 gate")
        entries.append((t, Rigid3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return Trajectory(entries)


def _reorthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation by polar decomposition (sign-corrected SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def parse_kitti(stream) -> Trajectory:
    """Parse a KITTI odometry pose file from a text stream or string."""
    entries: list[tuple[float, Rigid3]] = []
    index = 0
    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 12:
            raise ParseError(lineno, f"expected 12 fields, got {len(fields)}")
        try:
            vals = np.array([float(f) for f in fields]).reshape(3, 4)
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
        rot = vals[:, :3]
        deviation = np.abs(rot @ rot.T - np.eye(3)).max()
        if deviation > 1e-3 or np.linalg.det(rot) < 0.0:
            raise ParseError(lineno, f"rotation block off-orthonormal by {deviation:.2e}")
        entries.append((float(index),
                        Rigid3(matrix_to_quat(_reorthonormalize(rot)), vals[:, 3])))
        index += 1
    return Trajectory(entries)


def write_tum(trajectory: Trajectory) -> str:
    """Serialize to TUM format: 9 fractional digits, single spaces, \\n endings."""
    out = []
    for t, pose in trajectory.entries:
        qw, qx, qy, qz = pose.q
        tx, ty, tz = pose.t
        out.append(" ".join(f"{v:.9f}" for v in (t, tx, ty, tz, qx, qy, qz, qw)) + "\n")
    return "".join(out)


def write_kitti(trajectory: Trajectory) -> str:
    """Serialize to KITTI format (timestamps dropped, order preserved)."""
    out = []
    for _, pose in trajectory.entries:
        m = np.empty((3, 4))
        m[:, :3] = quat_to_matrix(pose.q)
        m[:, 3] = pose.t
        out.append(" ".join(f"{v:.9f}" for v in m.reshape(-1)) + "\n")
    return "".join(out)


FORMAT_PARSERS = {"tum": parse_tum, "kitti": parse_kitti}
FORMAT_WRITERS = {"tum": write_tum, "kitti": write_kitti}


def read_trajectory(path: str | Path, fmt: str = "tum") -> Trajectory:
    if fmt not in FORMAT_PARSERS:
        raise ValueError(f"unknown trajectory format {fmt!r}")
    with open(path, encoding="utf-8") as f:
        return FORMAT_PARSERS[fmt](f)


def write_trajectory(path: str | Path, trajectory: Trajectory, fmt: str = "tum") -> None:
    if fmt not in FORMAT_WRITERS:
        raise ValueError(f"unknown trajectory format {fmt!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(FORMAT_WRITERS[fmt](trajectory))


@dataclass
class SequenceManifest:
    """Names a frame sequence and, optionally, its ground truth file."""

    name: str
    frame_refs: list[str]
    ground_truth_file: str | None = None
    ground_truth_format: str = "tum"

    def __post_init__(self):
        if not self.frame_refs:
            raise ValueError("manifest needs at least one frame reference")
        if len(set(self.frame_refs)) != len(self.frame_refs):
            raise ValueError("manifest frame references must be unique")

    def load_ground_truth(self, base_dir: str | Path | None = None) -> Trajectory | None:
        if self.ground_truth_file is None:
            return None
        path = Path(self.ground_truth_file)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return read_trajectory(path, self.ground_truth_format)


def load_manifest(path: str | Path) -> SequenceManifest:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return SequenceManifest(
        name=doc["name"],
        frame_refs=list(doc["frames"]),
        ground_truth_file=doc.get("ground_truth_file"),
        ground_truth_format=doc.get("ground_truth_format", "tum"),
    )


def save_manifest(path: str | Path, manifest: SequenceManifest) -> None:
    doc = {
        "name": manifest.name,
        "frames": manifest.frame_refs,
        "ground_truth_file": manifest.ground_truth_file,
        "ground_truth_format": manifest.ground_truth_format,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
