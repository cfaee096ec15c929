"""Pose conversion: world-to-camera extrinsics to anchor-relative wire poses.

Multi-view models conventionally predict world-to-camera extrinsics. The
consumer's window chaining expects anchor-relative camera-to-world motion:

    T_anchor_frame = inv(c2w_anchor) @ c2w_frame = w2c_anchor @ inv(w2c_frame)

so the anchor's own relative pose is the identity by construction. Wire poses
carry a translation triple and an (x, y, z, w) quaternion.
"""

from __future__ import annotations

import math

import numpy as np


def invert_se3(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    r = m[:3, :3]
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ m[:3, 3]
    return out


def as_homogeneous(extrinsic: np.ndarray) -> np.ndarray:
    """Accept a 3x4 or 4x4 extrinsic; return 4x4."""
    extrinsic = np.asarray(extrinsic, dtype=np.float64)
    if extrinsic.shape == (4, 4):
        return extrinsic
    if extrinsic.shape == (3, 4):
        out = np.eye(4)
        out[:3] = extrinsic
        return out
    raise ValueError(f"extrinsic must be 3x4 or 4x4, got {extrinsic.shape}")


def rotation_to_quat_xyzw(m: np.ndarray) -> list[float]:
    """Shepperd's method, returned in wire order (x, y, z, w)."""
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        w, x, y, z = 0.25 * s, (m[2, 1] - m[1, 2]) / s, \
            (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w, x, y, z = (m[2, 1] - m[1, 2]) / s, 0.25 * s, \
            (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w, x, y, z = (m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, \
            0.25 * s, (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w, x, y, z = (m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, \
            (m[1, 2] + m[2, 1]) / s, 0.25 * s
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    if w < 0.0:
        norm = -norm
    return [x / norm, y / norm, z / norm, w / norm]


def anchor_relative_wire_poses(extrinsics_w2c: np.ndarray) -> list[dict]:
    """Convert per-frame world-to-camera extrinsics (anchor first) into the
    wire pose list: anchor-relative camera-to-world translation + quaternion."""
    mats = [as_homogeneous(e) for e in extrinsics_w2c]
    anchor_w2c = mats[0]
    poses = []
    for w2c in mats:
        rel = anchor_w2c @ invert_se3(w2c)
        poses.append({"t": [float(v) for v in rel[:3, 3]],
                      "q": rotation_to_quat_xyzw(rel[:3, :3])})
    return poses
