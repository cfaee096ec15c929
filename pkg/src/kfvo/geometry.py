"""Rigid and similarity transforms, Umeyama alignment, and trajectory error metrics.

Rotations are stored as unit quaternions in (w, x, y, z) order and renormalized
after every operation, which keeps drift negligible over long composition
chains. Translations are in meters. All functions are pure; values can be
shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateInput(ValueError):
    """Alignment input is too small or has rank-deficient point spread."""


class NoAssociation(ValueError):
    """No timestamp pairs could be associated between two trajectories."""


# ---------------------------------------------------------------------------
# quaternion core (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v):
    """Rotate a 3-vector by a unit quaternion (q v q*)."""
    w, x, y, z = q
    # t = 2 (q_vec x v); v' = v + w t + q_vec x t
    tx = 2.0 * (y * v[2] - z * v[1])
    ty = 2.0 * (z * v[0] - x * v[2])
    tz = 2.0 * (x * v[1] - y * v[0])
    return np.array([
        v[0] + w * tx + (y * tz - z * ty),
        v[1] + w * ty + (z * tx - x * tz),
        v[2] + w * tz + (x * ty - y * tx),
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    """Shepperd's method: pick the numerically largest component first."""
    m = np.asarray(m, dtype=np.float64)
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def rotvec_to_quat(rv):
    rv = np.asarray(rv, dtype=np.float64)
    angle = math.sqrt(rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2])
    if angle < 1e-12:
        # second-order series of [cos(a/2), sinc(a/2)/2 * rv]
        half = 0.5 - angle * angle / 48.0
        return quat_normalize(np.array([1.0 - angle * angle / 8.0,
                                        rv[0] * half, rv[1] * half, rv[2] * half]))
    s = math.sin(0.5 * angle) / angle
    return np.array([math.cos(0.5 * angle), rv[0] * s, rv[1] * s, rv[2] * s])


def quat_to_rotvec(q):
    w, x, y, z = q
    if w < 0.0:  # keep angle in [0, pi]
        w, x, y, z = -w, -x, -y, -z
    n = math.sqrt(x * x + y * y + z * z)
    if n < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * math.atan2(n, w)
    return (angle / n) * np.array([x, y, z])


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rigid3:
    """Rigid transform: rotation (unit quaternion, wxyz) + translation (m)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "Rigid3":
        return Rigid3()

    @staticmethod
    def from_matrix(m) -> "Rigid3":
        m = np.asarray(m, dtype=np.float64)
        return Rigid3(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @staticmethod
    def from_rotvec_trans(rv, t) -> "Rigid3":
        return Rigid3(rotvec_to_quat(rv), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.q)
        m[:3, 3] = self.t
        return m

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def rotation_vector(self) -> np.ndarray:
        return quat_to_rotvec(self.q)

    def inverse(self) -> "Rigid3":
        qc = quat_conjugate(self.q)
        return Rigid3(qc, -quat_rotate(qc, self.t))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return quat_rotate(self.q, p) + self.t
        return p @ quat_to_matrix(self.q).T + self.t

    def __matmul__(self, other: "Rigid3") -> "Rigid3":
        return compose(self, other)


def compose(a: Rigid3, b: Rigid3) -> Rigid3:
    """a then b in a's frame: (a.R b.R, a.R b.t + a.t), renormalized."""
    return Rigid3(quat_multiply(a.q, b.q), quat_rotate(a.q, b.t) + a.t)


def relative_pose(world_a: Rigid3, world_b: Rigid3) -> Rigid3:
    """Pose of b expressed in a's frame: inverse(world_a) o world_b."""
    return compose(world_a.inverse(), world_b)


@dataclass(frozen=True)
class Sim3:
    """Similarity transform: positive scale, rotation, translation."""

    scale: float = 1.0
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "Sim3":
        return Sim3()

    def inverse(self) -> "Sim3":
        qc = quat_conjugate(self.q)
        return Sim3(1.0 / self.scale, qc, -quat_rotate(qc, self.t) / self.scale)

    def apply(self, p) -> np.ndarray:
        """s R p + t for one point or an (n, 3) array of points."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return self.scale * quat_rotate(self.q, p) + self.t
        return self.scale * (p @ quat_to_matrix(self.q).T) + self.t

    def transform_pose(self, pose: Rigid3) -> Rigid3:
        """Map a camera pose into the aligned frame (scale acts on position only)."""
        return Rigid3(quat_multiply(self.q, pose.q), self.apply(pose.t))

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(self.scale * other.scale,
                    quat_multiply(self.q, other.q),
                    self.scale * quat_rotate(self.q, other.t) + self.t)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Timestamped pose sequence with strictly increasing timestamps."""

    entries: list[tuple[float, Rigid3]]

    def __post_init__(self):
        ts = [t for t, _ in self.entries]
        for i in range(1, len(ts)):
            if ts[i] <= ts[i - 1]:
                raise ValueError(f"timestamps not strictly increasing at index {i}")

    def __len__(self) -> int:
        return len(self.entries)

    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries])

    def positions(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.stack([p.t for _, p in self.entries])

    def transformed(self, g: Sim3) -> "Trajectory":
        return Trajectory([(t, g.transform_pose(p)) for t, p in self.entries])


# ---------------------------------------------------------------------------
# alignment and error metrics
# ---------------------------------------------------------------------------

def _spread_rank_ok(points: np.ndarray) -> bool:
    """Points supply enough constraints when their spread has rank >= 2."""
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    return svals[1] > 1e-9 * max(svals[0], 1e-3)


def umeyama_align(source, target, with_scale: bool = True) -> Sim3:
    """Least-squares Sim3 mapping source points onto target points.

    Minimizes sum ||target_i - (s R source_i + t)||^2 via the SVD closed form
    with the determinant sign correction. Scale is fixed to 1 when with_scale
    is off. Raises DegenerateInput for fewer than 3 points or when either
    point set is (near-)collinear, which leaves the rotation or scale
    unconstrained.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != tgt.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {tgt.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 point pairs, got {n}")
    if not _spread_rank_ok(src) or not _spread_rank_ok(tgt):
        raise DegenerateInput("point spread is rank-deficient (collinear or coincident)")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t

    cov = xt.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        sign[2] = -1.0
    rot = u @ np.diag(sign) @ vt

    if with_scale:
        var_s = (xs * xs).sum() / n
        scale = float((d * sign).sum() / var_s)
        if not scale > 0.0:
            raise DegenerateInput(f"non-positive recovered scale {scale}")
    else:
        scale = 1.0

    t = mu_t - scale * (rot @ mu_s)
    return Sim3(scale, matrix_to_quat(rot), t)


def associate(estimate: Trajectory, ground_truth: Trajectory,
              max_dt: float = 0.02) -> list[tuple[int, int]]:
    """Pair each estimate entry with the nearest ground-truth timestamp.

    Pairs with |dt| > max_dt are dropped. Returns (estimate_idx, gt_idx).
    """
    if not estimate.entries or not ground_truth.entries:
        return []
    ts_est = estimate.timestamps()
    ts_gt = ground_truth.timestamps()
    idx = np.searchsorted(ts_gt, ts_est)
    pairs = []
    for i, j in enumerate(idx):
        cand = [k for k in (j - 1, j) if 0 <= k < len(ts_gt)]
        k = min(cand, key=lambda k: abs(ts_gt[k] - ts_est[i]))
        if abs(ts_gt[k] - ts_est[i]) <= max_dt:
            pairs.append((i, k))
    return pairs


def ate_rmse(estimate: Trajectory, ground_truth: Trajectory,
             alignment: str = "sim3", max_dt: float = 0.02) -> float:
    """RMSE of translational residuals after the requested alignment.

    alignment is one of "none", "se3", "sim3". Association is by nearest
    timestamp within max_dt seconds. Raises NoAssociation when no pairs
    associate, and propagates DegenerateInput from the alignment step.
    """
    if alignment not in ("none", "se3", "sim3"):
        raise ValueError(f"unknown alignment {alignment!r}")
    pairs = associate(estimate, ground_truth, max_dt)
    if not pairs:
        raise NoAssociation("no timestamp pairs within tolerance")
    est_pts = np.stack([estimate.entries[i][1].t for i, _ in pairs])
    gt_pts = np.stack([ground_truth.entries[j][1].t for _, j in pairs])

    if alignment != "none":
        if len(pairs) < 3:
            raise DegenerateInput(f"alignment needs >= 3 pairs, got {len(pairs)}")
        g = umeyama_align(est_pts, gt_pts, with_scale=(alignment == "sim3"))
        est_pts = g.apply(est_pts)

    residuals = est_pts - gt_pts
    return float(np.sqrt((residuals * residuals).sum(axis=1).mean()))
