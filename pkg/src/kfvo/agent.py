"""Keyframe agent: observation construction, MLP actor/critic, gradients.

The observation concatenates the mean of the window's embedding tokens with
per-frame pose features (translation + rotation-vector of each frame relative
to the newest frame), giving a fixed length of D + 6W. Pose features are
normalized with running mean/std statistics; tokens are passed raw. Both
blocks can be zeroed independently for ablations.

The actor and critic are separate three-layer ReLU MLPs. The critic may take
a wider, privileged input (per-frame tracking errors and future ground-truth
baselines) that the actor never sees. Forward and backward passes are plain
numpy; gradients are exact (ReLU subgradient at 0 taken as 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .backend import BackendResponse
from .geometry import DegenerateInput, relative_pose, umeyama_align
from .window import GlobalMap, WindowState


class DimensionMismatch(ValueError):
    pass


class MissingGroundTruth(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationToggles:
    """Ablation switches: zero out the token or pose block of the observation."""

    use_tokens: bool = True
    use_pose: bool = True


class RunningNorm:
    """Per-dimension running mean/std via Welford accumulators."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.count == 0:
            return np.asarray(x, dtype=np.float64).copy()
        std = np.sqrt(self.var)
        return (x - self.mean) / np.maximum(std, 1e-6)

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    @staticmethod
    def from_state(count: int, mean: np.ndarray, m2: np.ndarray) -> "RunningNorm":
        norm = RunningNorm(len(mean))
        norm.count = int(count)
        norm.mean = np.asarray(mean, dtype=np.float64).copy()
        norm.m2 = np.asarray(m2, dtype=np.float64).copy()
        return norm


def observation_size(token_dim: int, window: int) -> int:
    return token_dim + 6 * window


def build_observation(window: WindowState, response: BackendResponse,
                      norm: RunningNorm, toggles: ObservationToggles = ObservationToggles(),
                      update_norm: bool = False) -> np.ndarray:
    """Mean token plus normalized per-frame pose features, relative to newest.

    Pass update_norm=True during training so the normalizer ingests the raw
    pose features before normalizing; leave it False to use frozen statistics.
    """
    if list(response.frame_ids) != [f.id for f in window.frames]:
        raise DimensionMismatch("response frames do not match window frames")
    tokens = np.asarray(response.tokens, dtype=np.float64)
    token_dim = tokens.shape[1]
    cap = window.capacity
    mean_token = tokens.mean(axis=0) if toggles.use_tokens else np.zeros(token_dim)

    pose_feats = np.zeros(6 * cap)
    if toggles.use_pose:
        newest_rel = response.rel_poses[-1]
        for i, rel in enumerate(response.rel_poses):
            d = relative_pose(newest_rel, rel)
            pose_feats[6 * i:6 * i + 3] = d.t
            pose_feats[6 * i + 3:6 * i + 6] = d.rotation_vector()
        if len(norm.mean) != 6 * cap:
            raise DimensionMismatch(f"norm dim {len(norm.mean)} != pose block {6 * cap}")
        if update_norm:
            norm.update(pose_feats)
        pose_feats = norm.normalize(pose_feats)

    obs = np.concatenate([mean_token, pose_feats])
    if not np.isfinite(obs).all():
        raise DimensionMismatch("observation contains NaN or Inf")
    return obs


def align_window_errors(est_points: np.ndarray, gt_points: np.ndarray,
                        n_align: int | None = None) -> tuple[np.ndarray, bool]:
    """Per-frame translational errors after Sim(3) alignment of the window.

    Aligns on the first n_align points (all points when None), falling back to
    all points and finally to no alignment when the spread is degenerate.
    Returns the error vector and whether an alignment was applied.
    """
    est = np.asarray(est_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    for subset in ([slice(0, n_align)] if n_align else []) + [slice(None)]:
        try:
            g = umeyama_align(est[subset], gt[subset], with_scale=True)
        except DegenerateInput:
            continue
        return np.linalg.norm(g.apply(est) - gt, axis=1), True
    return np.linalg.norm(est - gt, axis=1), False


def privileged_observation(base: np.ndarray, window: WindowState, gmap: GlobalMap,
                           gt_positions: np.ndarray, horizon: int = 4) -> np.ndarray:
    """Critic-only extension: window tracking errors and upcoming baselines.

    Appends one aligned translational error per window slot (zero-padded when
    the window is short) and the magnitudes of the next `horizon` consecutive
    ground-truth steps after the newest frame (zero-padded past sequence end).
    The actor never receives this vector.
    """
    for f in window.frames:
        if f.gt_pose is None:
            raise MissingGroundTruth(f"frame {f.id} has no ground-truth pose")
    est = np.stack([gmap.global_poses[f.id].t for f in window.frames])
    gt = np.stack([f.gt_pose.t for f in window.frames])
    errors, _ = align_window_errors(est, gt)
    err_block = np.zeros(window.capacity)
    err_block[:len(errors)] = errors

    gt_positions = np.asarray(gt_positions, dtype=np.float64)
    future = np.zeros(horizon)
    last = window.newest.id
    for j in range(horizon):
        a, b = last + j, last + j + 1
        if b < len(gt_positions):
            future[j] = np.linalg.norm(gt_positions[b] - gt_positions[a])
    return np.concatenate([base, err_block, future])


# ---------------------------------------------------------------------------
# three-layer MLP with manual gradients
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.normal(0.0, 1.0, shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q


def init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int,
             out_gain: float) -> MlpParams:
    sizes = [(hidden, in_dim), (hidden, hidden), (out_dim, hidden)]
    gains = [math.sqrt(2.0), math.sqrt(2.0), out_gain]
    weights = [_orthogonal(rng, s, g) for s, g in zip(sizes, gains)]
    biases = [np.zeros(s[0]) for s in sizes]
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Affine+ReLU stack; returns output and the activation cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    if h.shape[1] != params.in_dim:
        raise DimensionMismatch(f"input width {h.shape[1]} != expected {params.in_dim}")
    cache = [h]
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < len(params.weights) - 1:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return (h[0] if single else h), cache


def mlp_backward(params: MlpParams, cache: list, dout: np.ndarray) -> list[np.ndarray]:
    """Exact gradients for every weight and bias, ordered as params.flat()."""
    dout = np.asarray(dout, dtype=np.float64)
    dh = dout.reshape(1, -1) if dout.ndim == 1 else dout
    grads: list[np.ndarray] = []
    for i in reversed(range(len(params.weights))):
        if i < len(params.weights) - 1:
            dh = dh * (cache[i + 1] > 0.0)
        grads.insert(0, dh.sum(axis=0))          # bias
        grads.insert(0, dh.T @ cache[i])         # weight
        dh = dh @ params.weights[i]
    return grads


@dataclass
class PolicyParams:
    """Actor and critic networks sharing the three-layer architecture."""

    actor: MlpParams
    critic: MlpParams

    @property
    def obs_dim(self) -> int:
        return self.actor.in_dim

    @property
    def critic_dim(self) -> int:
        return self.critic.in_dim

    def flat(self) -> list[np.ndarray]:
        return self.actor.flat() + self.critic.flat()


def init_policy(rng: np.random.Generator, obs_dim: int, critic_dim: int,
                hidden: int = 128) -> PolicyParams:
    actor = init_mlp(rng, obs_dim, hidden, 2, out_gain=0.01)
    critic = init_mlp(rng, critic_dim, hidden, 1, out_gain=1.0)
    return PolicyParams(actor, critic)


def actor_forward(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    logits, _ = mlp_forward(params.actor, obs)
    return logits


def critic_forward(params: PolicyParams, obs: np.ndarray) -> np.ndarray | float:
    value, _ = mlp_forward(params.critic, obs)
    return float(value[0]) if value.ndim == 1 else value[:, 0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]:
    """Draw from the 2-way categorical; returns (action, log_prob, entropy)."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    action = 0 if rng.random() < p[0] else 1
    entropy = float(-(p * logp).sum())
    return action, float(logp[action]), entropy


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: PolicyParams, norm: RunningNorm, meta: dict) -> None:
    """Write a versioned checkpoint: weights, normalizer state, metadata."""
    arrays = {"version": np.array(CHECKPOINT_VERSION)}
    for name, net in (("actor", params.actor), ("critic", params.critic)):
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}_w{i}"] = w
            arrays[f"{name}_b{i}"] = b
    st = norm.state()
    arrays["norm_count"] = np.array(st["count"])
    arrays["norm_mean"] = st["mean"]
    arrays["norm_m2"] = st["m2"]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[PolicyParams, RunningNorm, dict]:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        nets = {}
        for name in ("actor", "critic"):
            weights = [data[f"{name}_w{i}"] for i in range(3)]
            biases = [data[f"{name}_b{i}"] for i in range(3)]
            nets[name] = MlpParams(weights, biases)
        norm = RunningNorm.from_state(data["norm_count"], data["norm_mean"], data["norm_m2"])
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    return PolicyParams(nets["actor"], nets["critic"]), norm, meta
