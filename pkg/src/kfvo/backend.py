"""Multi-view backends: synthetic parallax-aware oracle and remote client.

A backend receives the current window (anchor first) and returns, per frame,
a pose relative to the anchor plus an embedding token. The synthetic backend
perturbs ground truth with noise that grows as the mean inter-frame baseline
shrinks, mimicking the low-parallax failure mode of multi-view estimators, so
a keyframe policy has signal to learn at desk scale. The remote backend
carries the same contract over newline-delimited JSON (stdio or TCP) to an
external model service.

Synthetic responses are deterministic: noise streams are keyed by
(world seed, frame id, request counter), so identical request histories give
bit-identical outputs.
"""

from __future__ import annotations

import json
import math
import select
import shlex
import socket
import subprocess
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (Rigid3, Trajectory, compose, quat_multiply, quat_to_matrix,
                       relative_pose, rotvec_to_quat)


class UnknownFrame(KeyError):
    """Requested frame id does not exist in the synthetic world."""


class BadConfig(ValueError):
    """World configuration is invalid."""


class ProtocolError(RuntimeError):
    """Malformed or out-of-contract message on the backend wire."""


class BackendError(RuntimeError):
    """The remote backend reported a failure for this request."""


class Timeout(RuntimeError):
    """The remote backend did not answer within the deadline."""


@dataclass
class BackendRequest:
    """Window contents, anchor first. refs mirror ids (paths for remote use)."""

    frame_ids: list[int]
    refs: list[str] | None = None

    def __post_init__(self):
        if not self.frame_ids:
            raise ValueError("empty backend request")
        if self.refs is None:
            self.refs = [str(i) for i in self.frame_ids]
        if len(self.refs) != len(self.frame_ids):
            raise ValueError("refs and frame_ids lengths differ")

    @property
    def anchor_id(self) -> int:
        return self.frame_ids[0]


@dataclass
class BackendResponse:
    """Anchor-relative poses and tokens, one per requested frame, same order."""

    frame_ids: list[int]
    rel_poses: list[Rigid3]
    tokens: np.ndarray  # (n, D)

    def __post_init__(self):
        n = len(self.frame_ids)
        if len(self.rel_poses) != n or len(self.tokens) != n:
            raise ValueError("response entry counts differ from frame count")
        anchor = self.rel_poses[0]
        if (np.abs(anchor.t).max() > 1e-10
                or abs(abs(anchor.q[0]) - 1.0) > 1e-10):
            raise ValueError("anchor relative pose is not identity")


# ---------------------------------------------------------------------------
# synthetic worlds
# ---------------------------------------------------------------------------

PROFILES = ("orbit", "corridor", "stop-and-go", "random-walk")


@dataclass
class NoiseParams:
    sigma0: float = 0.01       # base translation noise, meters
    kappa: float = 0.02        # low-parallax amplification, meters
    eps: float = 0.01          # baseline floor, meters
    sigma_token: float = 0.05  # token noise, dimensionless

    def __post_init__(self):
        if min(self.sigma0, self.kappa, self.sigma_token) < 0 or self.eps <= 0:
            raise BadConfig("noise parameters must be >= 0 with eps > 0")


@dataclass
class WorldConfig:
    length: int
    profile: str = "stop-and-go"
    seed: int = 0
    dt: float = 0.1
    token_dim: int = 32
    noise: NoiseParams = field(default_factory=NoiseParams)
    radius: float = 2.0   # orbit
    speed: float = 1.2    # corridor / stop-and-go / random-walk scale
    sway: float = 0.2     # corridor lateral amplitude

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseParams(**self.noise)
        if self.length <= 0:
            raise BadConfig(f"world length must be positive, got {self.length}")
        if self.profile not in PROFILES:
            raise BadConfig(f"unknown profile {self.profile!r}, expected one of {PROFILES}")
        if self.dt <= 0 or self.token_dim <= 0:
            raise BadConfig("dt and token_dim must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "WorldConfig":
        return WorldConfig(**doc)


def _yaw_quat(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


def _profile_poses(config: WorldConfig) -> list[Rigid3]:
    n = config.length
    rng = np.random.default_rng([config.seed % 2**32, 0])
    if config.profile == "orbit":
        theta = 2.0 * math.pi * np.arange(n) / n
        r = config.radius
        return [Rigid3(_yaw_quat(th), np.array([r * math.sin(th), r * (1 - math.cos(th)), 0.0]))
                for th in theta]
    if config.profile == "corridor":
        t = np.arange(n) * config.dt
        omega = 2.0 * math.pi / 20.0  # 20 s sway period
        poses = []
        for ti in t:
            x = config.speed * ti
            y = config.sway * math.sin(omega * ti)
            yaw = math.atan2(config.sway * omega * math.cos(omega * ti), config.speed)
            poses.append(Rigid3(_yaw_quat(yaw), np.array([x, y, 0.0])))
        return poses
    if config.profile == "stop-and-go":
        poses = [Rigid3.identity()]
        pos = np.zeros(3)
        yaw = 0.0
        moving = True
        remaining = int(rng.integers(4, 11))
        while len(poses) < n:
            if remaining == 0:
                moving = not moving
                remaining = int(rng.integers(4, 11)) if moving else int(rng.integers(3, 9))
            if moving:
                yaw += float(rng.normal(0.0, 0.03))
                step = config.speed * config.dt
                pos = pos + step * np.array([math.cos(yaw), math.sin(yaw), 0.0])
            poses.append(Rigid3(_yaw_quat(yaw), pos))
            remaining -= 1
        return poses
    # random-walk: OU-smoothed velocity and yaw rate
    poses = [Rigid3.identity()]
    pos = np.zeros(3)
    vel = np.array([config.speed, 0.0, 0.0])
    yaw = 0.0
    yaw_rate = 0.0
    for _ in range(n - 1):
        vel = 0.9 * vel + 0.1 * rng.normal(0.0, config.speed, 3) * np.array([1, 1, 0.2])
        yaw_rate = 0.9 * yaw_rate + 0.1 * float(rng.normal(0.0, 0.5))
        pos = pos + vel * config.dt
        yaw += yaw_rate * config.dt
        poses.append(Rigid3(_yaw_quat(yaw), pos))
    return poses


def _pose_features(pose: Rigid3) -> np.ndarray:
    """12-vector of rotation-matrix rows followed by translation."""
    return np.concatenate([quat_to_matrix(pose.q).reshape(-1), pose.t])


@dataclass
class SyntheticWorld:
    """Ground truth plus a fixed random token field and a noise model."""

    config: WorldConfig
    trajectory: Trajectory
    phi: np.ndarray  # (D, 12) token projection, fixed per world
    request_counter: int = 0

    @property
    def token_dim(self) -> int:
        return self.config.token_dim

    def gt_pose(self, frame_id: int) -> Rigid3:
        if not 0 <= frame_id < len(self.trajectory):
            raise UnknownFrame(frame_id)
        return self.trajectory.entries[frame_id][1]

    def timestamp(self, frame_id: int) -> float:
        if not 0 <= frame_id < len(self.trajectory):
            raise UnknownFrame(frame_id)
        return self.trajectory.entries[frame_id][0]

    def process(self, request: BackendRequest) -> BackendResponse:
        return synthetic_process(self, request)


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Build the deterministic world for a config (same seed, same world)."""
    poses = _profile_poses(config)
    origin_inv = poses[0].inverse()
    poses = [compose(origin_inv, p) for p in poses]
    entries = [(i * config.dt, p) for i, p in enumerate(poses)]
    phi_rng = np.random.default_rng([config.seed % 2**32, 1])
    phi = phi_rng.normal(0.0, 1.0 / math.sqrt(12.0), (config.token_dim, 12))
    return SyntheticWorld(config, Trajectory(entries), phi)


def noise_sigma(noise: NoiseParams, mean_baseline: float) -> float:
    """Translation noise std for a window with the given mean baseline.

    Monotonically non-increasing in the baseline: low parallax means a larger
    estimation error.
    """
    return noise.sigma0 * (1.0 + noise.kappa / (mean_baseline + noise.eps))


def synthetic_process(world: SyntheticWorld, request: BackendRequest) -> BackendResponse:
    """Ground-truth relative poses perturbed by parallax-dependent noise.

    Noise std is sigma0 * (1 + kappa / (mean_baseline + eps)): the smaller the
    mean inter-frame baseline inside the window, the noisier the estimate.
    Rotation noise is a rotation-vector perturbation at a tenth of the
    translation std. The anchor's relative pose is exactly identity.
    """
    gt = [world.gt_pose(fid) for fid in request.frame_ids]
    counter = world.request_counter
    world.request_counter += 1

    if len(gt) > 1:
        steps = [np.linalg.norm(gt[i + 1].t - gt[i].t) for i in range(len(gt) - 1)]
        mean_baseline = float(np.mean(steps))
    else:
        mean_baseline = 0.0
    noise = world.config.noise
    sigma = noise_sigma(noise, mean_baseline)

    anchor_gt = gt[0]
    seed = world.config.seed % 2**32
    rel_poses = []
    tokens = np.empty((len(gt), world.token_dim))
    for i, (fid, pose) in enumerate(zip(request.frame_ids, gt)):
        rng = None
        if sigma > 0.0 or noise.sigma_token > 0.0:
            rng = np.random.default_rng([seed, 2, fid, counter])
        if i == 0:
            rel = Rigid3.identity()
        else:
            rel = relative_pose(anchor_gt, pose)
            if sigma > 0.0:
                dt = rng.normal(0.0, sigma, 3)
                drot = rng.normal(0.0, sigma / 10.0, 3)
                rel = Rigid3(quat_multiply(rel.q, rotvec_to_quat(drot)), rel.t + dt)
        rel_poses.append(rel)
        tok = np.tanh(world.phi @ _pose_features(pose))
        if noise.sigma_token > 0.0:
            tok = tok + rng.normal(0.0, noise.sigma_token, world.token_dim)
        tokens[i] = tok
    return BackendResponse(list(request.frame_ids), rel_poses, tokens)


# ---------------------------------------------------------------------------
# wire protocol: newline-delimited JSON over stdio or TCP
# ---------------------------------------------------------------------------

def _pose_from_wire(doc: dict) -> Rigid3:
    try:
        t = np.array([float(v) for v in doc["t"]])
        qx, qy, qz, qw = (float(v) for v in doc["q"])
        if t.shape != (3,):
            raise ValueError(f"pose translation has {t.size} components")
        return Rigid3(np.array([qw, qx, qy, qz]), t)
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(f"bad pose entry: {e}") from None


def pose_to_wire(pose: Rigid3) -> dict:
    qw, qx, qy, qz = pose.q
    return {"t": [float(v) for v in pose.t], "q": [float(qx), float(qy), float(qz), float(qw)]}


class RemoteBackend:
    """Client for the backend wire protocol, one request in flight at a time.

    Endpoints: ``tcp://host:port`` connects a socket; ``stdio:<command>``
    spawns the command and speaks over its stdin/stdout. ``hello`` messages
    (the service handshake advertising its token dimension) are consumed
    transparently. Anchor poses are validated within 1e-6 and snapped to exact
    identity, which the window chaining assumes.
    """

    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.token_dim: int | None = None
        self._next_id = 0
        self._sock = None
        self._proc = None
        if endpoint.startswith("tcp://"):
            host, _, port = endpoint[len("tcp://"):].rpartition(":")
            try:
                self._sock = socket.create_connection((host, int(port)), timeout=timeout)
            except (OSError, ValueError) as e:
                raise ProtocolError(f"cannot connect to {endpoint}: {e}") from None
            self._reader = self._sock.makefile("r", encoding="utf-8")
        elif endpoint.startswith("stdio:"):
            cmd = shlex.split(endpoint[len("stdio:"):])
            if not cmd:
                raise ProtocolError("empty stdio command")
            self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, text=True,
                                          bufsize=1, encoding="utf-8")
        else:
            raise ProtocolError(f"endpoint must start with tcp:// or stdio:, got {endpoint!r}")

    def _send_line(self, line: str) -> None:
        try:
            if self._sock is not None:
                self._sock.sendall((line + "\n").encode("utf-8"))
            else:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
        except (OSError, BrokenPipeError) as e:
            raise ProtocolError(f"backend connection lost: {e}") from None

    def _read_line(self) -> str:
        if self._sock is not None:
            self._sock.settimeout(self.timeout)
            try:
                line = self._reader.readline()
            except (socket.timeout, TimeoutError):
                raise Timeout(f"no response within {self.timeout}s") from None
        else:
            ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
            if not ready:
                raise Timeout(f"no response within {self.timeout}s")
            line = self._proc.stdout.readline()
        if not line:
            raise ProtocolError("backend closed the stream")
        return line

    def process(self, request: BackendRequest) -> BackendResponse:
        req_id = self._next_id
        self._next_id += 1
        msg = {"type": "process", "id": req_id,
               "anchor": request.refs[0], "frames": list(request.refs)}
        self._send_line(json.dumps(msg))

        while True:
            line = self._read_line()
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ProtocolError(f"invalid JSON from backend: {e}") from None
            if not isinstance(doc, dict):
                raise ProtocolError("backend message is not an object")
            kind = doc.get("type")
            if kind == "hello":
                self.token_dim = int(doc.get("token_dim", 0)) or None
                continue
            if kind == "error":
                raise BackendError(str(doc.get("message", "unspecified backend error")))
            if kind != "result":
                raise ProtocolError(f"unexpected message type {kind!r}")
            if doc.get("id") != req_id:
                raise ProtocolError(f"response id {doc.get('id')} != request id {req_id}")
            return self._parse_result(doc, request)

    def _parse_result(self, doc: dict, request: BackendRequest) -> BackendResponse:
        poses = doc.get("poses")
        tokens = doc.get("tokens")
        n = len(request.frame_ids)
        if not isinstance(poses, list) or len(poses) != n:
            raise ProtocolError(f"expected {n} poses, got {None if poses is None else len(poses)}")
        if not isinstance(tokens, list) or len(tokens) != n:
            raise ProtocolError(f"expected {n} tokens, got {None if tokens is None else len(tokens)}")
        rel_poses = [_pose_from_wire(p) for p in poses]
        anchor = rel_poses[0]
        if np.abs(anchor.t).max() > 1e-6 or abs(abs(anchor.q[0]) - 1.0) > 1e-6:
            raise ProtocolError("anchor relative pose is not identity")
        rel_poses[0] = Rigid3.identity()
        try:
            tok = np.array(tokens, dtype=np.float64)
        except ValueError as e:
            raise ProtocolError(f"bad token payload: {e}") from None
        if tok.ndim != 2 or (self.token_dim is not None and tok.shape[1] != self.token_dim):
            raise ProtocolError(f"token array shape {tok.shape} inconsistent with handshake")
        return BackendResponse(list(request.frame_ids), rel_poses, tok)

    def close(self) -> None:
        if self._sock is not None:
            self._reader.close()
            self._sock.close()
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_process(endpoint: str, request: BackendRequest,
                   timeout: float = 120.0) -> BackendResponse:
    """One-shot request against a remote backend (connection per call)."""
    with RemoteBackend(endpoint, timeout=timeout) as client:
        return client.process(request)
