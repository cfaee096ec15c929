"""Reward, advantage estimation, and the PPO training loop.

The per-step reward scores the window's tracking quality right after each
decision: window pose estimates are aligned to ground truth with Umeyama on
the first few window poses, the translational RMSE e_tran is taken over the
window, and the reward is

    lambda1 * max(clip_floor, threshold - e_tran) + lambda2 * alpha(action)

where alpha(action) is the keyframe compensation term (applied on Keyframe
actions only) that keeps the policy from collapsing onto a single action.

Training alternates a rollout phase over parallel synthetic-world
environments with a clipped-surrogate PPO update phase (GAE advantages,
minibatch Adam steps, global gradient-norm clipping, linearly decayed
learning rate). Transitions collected during the window initialization or
from faulted environments never enter the update batches.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import agent as agent_mod
from .agent import (ObservationToggles, PolicyParams, RunningNorm, actor_forward,
                    align_window_errors, build_observation, critic_forward,
                    log_softmax, mlp_backward, mlp_forward, observation_size,
                    privileged_observation, sample_action)
from .backend import BackendRequest, SyntheticWorld, WorldConfig, generate_world, synthetic_process
from .window import (Action, Frame, GlobalMap, WindowState, apply_action,
                     apply_backend, push_frame)

ACTIONS = (Action.KEYFRAME, Action.DISCARD)


class NonFiniteLoss(RuntimeError):
    """PPO update hit a NaN/Inf loss; carries the offending minibatch."""

    def __init__(self, message: str, minibatch: dict):
        super().__init__(message)
        self.minibatch = minibatch


@dataclass
class RewardParams:
    lambda1: float = 0.01
    lambda2: float = 5e-3
    threshold: float = 0.2        # meters
    alpha_keyframe: float = 2.5e-5
    clip_floor: float = -1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)
                and math.isfinite(self.alpha_keyframe) and math.isfinite(self.clip_floor)):
            raise ValueError("reward parameters must be finite")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    n_envs: int = 20
    rollout_len: int = 512
    lr_start: float = 3e-4
    lr_end: float = 3e-5
    total_steps: int = 200_000
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    k_align: int = 4
    frame_drop_prob: float = 0.1
    hidden: int = 128
    horizon: int = 4              # privileged future-baseline count
    e_tran_mode: str = "window"   # or "newest"
    checkpoint_every: int = 10    # updates

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if not self.lr_start >= self.lr_end > 0.0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.e_tran_mode not in ("window", "newest"):
            raise ValueError(f"unknown e_tran_mode {self.e_tran_mode!r}")


def reward_value(e_tran: float, action: Action, params: RewardParams) -> float:
    """The reward formula itself, given a precomputed translational error."""
    alpha = params.alpha_keyframe if action is Action.KEYFRAME else 0.0
    return params.lambda1 * max(params.clip_floor, params.threshold - e_tran) \
        + params.lambda2 * alpha


def window_translation_error(window: WindowState, gmap: GlobalMap,
                             k_align: int = 4, mode: str = "window") -> tuple[float, bool]:
    """Aligned translational error of the current window estimates vs GT.

    Aligns with Umeyama on the first k_align window poses, falling back to all
    poses and finally to no alignment when degenerate (the flag in the return
    reports whether an alignment was applied). mode "window" takes the RMSE
    over all window frames, "newest" the newest frame's error alone.
    """
    est = np.stack([gmap.global_poses[f.id].t for f in window.frames])
    gt = np.stack([f.gt_pose.t for f in window.frames])
    errors, aligned = align_window_errors(est, gt, n_align=k_align)
    if mode == "newest":
        return float(errors[-1]), aligned
    return float(np.sqrt((errors ** 2).mean())), aligned


def compute_reward(window: WindowState, gmap: GlobalMap, action: Action,
                   params: RewardParams, k_align: int = 4,
                   mode: str = "window") -> float:
    """Reward for the just-executed action, from the post-action window."""
    e_tran, _ = window_translation_error(window, gmap, k_align, mode)
    return reward_value(e_tran, action, params)


def lr_schedule(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Linear decay from lr_start at step 0 to lr_end at step total."""
    frac = min(max(step / total, 0.0), 1.0) if total > 0 else 1.0
    return (1.0 - frac) * lr_start + frac * lr_end


# ---------------------------------------------------------------------------
# rollout buffer and GAE
# ---------------------------------------------------------------------------

class RolloutBuffer:
    """Fixed-size per-env transition storage for one rollout phase."""

    def __init__(self, rollout_len: int, n_envs: int, obs_dim: int, priv_dim: int):
        t, n = rollout_len, n_envs
        self.obs = np.zeros((t, n, obs_dim))
        self.priv = np.zeros((t, n, priv_dim))
        self.actions = np.zeros((t, n), dtype=np.int64)
        self.log_probs = np.zeros((t, n))
        self.rewards = np.zeros((t, n))
        self.values = np.zeros((t, n))
        self.dones = np.zeros((t, n), dtype=bool)
        self.valid = np.zeros((t, n), dtype=bool)
        self.bootstrap = np.zeros(n)

    def flatten(self, advantages: np.ndarray, returns: np.ndarray) -> dict:
        m = self.valid.reshape(-1)
        flat = lambda a: a.reshape(-1, *a.shape[2:])[m]
        return {
            "obs": flat(self.obs),
            "priv": flat(self.priv),
            "actions": flat(self.actions),
            "log_probs": flat(self.log_probs),
            "advantages": advantages.reshape(-1)[m],
            "returns": returns.reshape(-1)[m],
        }


def gae_advantages(buffer: RolloutBuffer, gamma: float,
                   gae_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Standard GAE(gamma, lambda) recursion; returns = advantages + values.

    The bootstrap value is used past the buffer end and cut off at episode
    boundaries (done flags). Advantages are returned unnormalized; the update
    normalizes per minibatch.
    """
    t_len = buffer.rewards.shape[0]
    adv = np.zeros_like(buffer.rewards)
    last = np.zeros(buffer.rewards.shape[1])
    for t in reversed(range(t_len)):
        nonterminal = 1.0 - buffer.dones[t]
        next_value = buffer.bootstrap if t == t_len - 1 else buffer.values[t + 1]
        delta = buffer.rewards[t] + gamma * next_value * nonterminal - buffer.values[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        adv[t] = last
    return adv, adv + buffer.values


# ---------------------------------------------------------------------------
# Adam and the PPO update
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a flat list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def _clip_global_norm(grads: list[np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale


def policy_objective(logits: np.ndarray, actions: np.ndarray, logp_old: np.ndarray,
                     advantages: np.ndarray, clip_eps: float,
                     entropy_coef: float) -> tuple[float, float, np.ndarray, float, float]:
    """Clipped surrogate loss and its exact gradient w.r.t. the logits.

    Returns (policy_loss, mean_entropy, dlogits, clip_fraction, approx_kl).
    The gradient flows only through the active min branch: wherever the
    clipped branch wins and the ratio sits outside the clip interval, that
    sample contributes nothing through the ratio path.
    """
    n = len(actions)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - logp_old)

    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    policy_loss = float(-np.minimum(unclipped, clipped).mean())
    entropy = -(probs * logp_all).sum(axis=1)

    active = (unclipped <= clipped).astype(np.float64)
    dlogp = -(advantages * ratio * active) / n
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    # entropy bonus: dH/dlogits = -p * (logp + H)
    dH = -probs * (logp_all + entropy[:, None])
    dlogits += -(entropy_coef / n) * dH

    clip_frac = float((np.abs(ratio - 1.0) > clip_eps).mean())
    approx_kl = float(((ratio - 1.0) - np.log(ratio)).mean())
    return policy_loss, float(entropy.mean()), dlogits, clip_frac, approx_kl


def ppo_update(params: PolicyParams, opt: Adam, batch: dict, config: PpoConfig,
               lr: float, rng: np.random.Generator) -> UpdateStats:
    """Clipped-surrogate PPO epochs over shuffled minibatches.

    Policy loss uses the ratio-clipped objective, the critic (on privileged
    input) is regressed to the returns, entropy is maximized with a small
    coefficient, and gradients are clipped by global L2 norm before each
    Adam step. Advantages are normalized per minibatch.
    """
    n = len(batch["actions"])
    stats = np.zeros(5)
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            mb = {k: v[idx] for k, v in batch.items()}
            adv = mb["advantages"]
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)

            logits, cache_a = mlp_forward(params.actor, mb["obs"])
            policy_loss, entropy_mean, dlogits, clip_frac, approx_kl = \
                policy_objective(logits, mb["actions"], mb["log_probs"], adv,
                                 config.clip_eps, config.entropy_coef)

            values, cache_c = mlp_forward(params.critic, mb["priv"])
            values = values[:, 0]
            verr = values - mb["returns"]
            value_loss = float((verr ** 2).mean())

            total_loss = policy_loss + config.value_coef * value_loss \
                - config.entropy_coef * entropy_mean
            if not math.isfinite(total_loss):
                raise NonFiniteLoss(
                    f"loss diverged (policy={policy_loss}, value={value_loss})", mb)

            grads_a = mlp_backward(params.actor, cache_a, dlogits)
            dvalues = (2.0 * config.value_coef / len(idx)) * verr
            grads_c = mlp_backward(params.critic, cache_c, dvalues[:, None])

            grads = grads_a + grads_c
            _clip_global_norm(grads, config.max_grad_norm)
            opt.step(params.flat(), grads, lr)

            stats += np.array([policy_loss, value_loss, entropy_mean,
                               clip_frac, approx_kl])
            count += 1
    stats /= max(count, 1)
    return UpdateStats(*stats)


# ---------------------------------------------------------------------------
# environment and rollout
# ---------------------------------------------------------------------------

class VoEnvironment:
    """One synthetic world driven through the sliding-window pipeline.

    An episode replays the world's frame sequence; during training, incoming
    frames are randomly dropped for robustness. Decision points (a full window
    with a fresh backend response) expose the observation pair; step() applies
    the chosen action and computes the reward from the post-action window.
    """

    def __init__(self, world: SyntheticWorld, reward_params: RewardParams,
                 config: PpoConfig, norm: RunningNorm,
                 toggles: ObservationToggles = ObservationToggles(),
                 base_seed: int = 0, training: bool = True):
        self.world = world
        self.reward_params = reward_params
        self.config = config
        self.norm = norm
        self.toggles = toggles
        self.base_seed = base_seed % 2**32
        self.training = training
        self.episode = -1
        self.gt_positions = world.trajectory.positions()
        self.obs: np.ndarray | None = None
        self.priv: np.ndarray | None = None

    def reset(self) -> bool:
        """Start a new episode; returns False if it yields no decision point."""
        self.episode += 1
        self.window = WindowState(capacity=8)
        self.gmap = GlobalMap()
        self.cursor = 0
        self.drop_rng = np.random.default_rng([self.base_seed, 4, self.episode])
        return self._advance()

    def _advance(self) -> bool:
        n = len(self.world.trajectory)
        while self.cursor < n:
            fid = self.cursor
            self.cursor += 1
            if (self.training and self.config.frame_drop_prob > 0.0
                    and self.drop_rng.random() < self.config.frame_drop_prob):
                continue
            frame = Frame(fid, self.world.timestamp(fid), gt_pose=self.world.gt_pose(fid))
            push_frame(self.window, frame, self.gmap)
            request = BackendRequest([f.id for f in self.window.frames])
            response = synthetic_process(self.world, request)
            apply_backend(self.window, response, self.gmap)
            if self.window.is_full():
                self.obs = build_observation(self.window, response, self.norm,
                                             self.toggles, update_norm=self.training)
                self.priv = privileged_observation(self.obs, self.window, self.gmap,
                                                   self.gt_positions, self.config.horizon)
                return True
        self.obs = None
        self.priv = None
        return False

    def step(self, action: Action) -> tuple[float, bool]:
        apply_action(self.window, self.gmap, action)
        reward = compute_reward(self.window, self.gmap, action, self.reward_params,
                                self.config.k_align, self.config.e_tran_mode)
        alive = self._advance()
        return reward, not alive


def rollout(envs: list[VoEnvironment], params: PolicyParams, config: PpoConfig,
            rng: np.random.Generator) -> RolloutBuffer:
    """Collect rollout_len transitions per environment under a fixed policy.

    A faulted environment is reset and the partial episode it contributed to
    this buffer is masked out, so error states never reach the update.
    """
    obs_dim = params.obs_dim
    priv_dim = params.critic_dim
    buf = RolloutBuffer(config.rollout_len, len(envs), obs_dim, priv_dim)
    episode_start = [0] * len(envs)

    def fresh_episode(env):
        for _ in range(100):
            if env.reset():
                return
        raise RuntimeError(f"world of length {len(env.world.trajectory)} never "
                           f"fills the window; no decisions to collect")

    for env in envs:
        if env.obs is None:
            fresh_episode(env)

    for t in range(config.rollout_len):
        for i, env in enumerate(envs):
            obs, priv = env.obs, env.priv
            logits = actor_forward(params, obs)
            a, logp, _ = sample_action(logits, rng)
            value = critic_forward(params, priv)
            try:
                reward, done = env.step(ACTIONS[a])
            except Exception:
                buf.valid[episode_start[i]:t + 1, i] = False
                fresh_episode(env)
                episode_start[i] = t + 1
                continue
            buf.obs[t, i] = obs
            buf.priv[t, i] = priv
            buf.actions[t, i] = a
            buf.log_probs[t, i] = logp
            buf.rewards[t, i] = reward
            buf.values[t, i] = value
            buf.dones[t, i] = done
            buf.valid[t, i] = True
            if done:
                episode_start[i] = t + 1
                fresh_episode(env)
    for i, env in enumerate(envs):
        buf.bootstrap[i] = critic_forward(params, env.priv)
    return buf


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

METRICS_FIELDS = ["update", "step", "lr", "mean_reward", "keyframe_rate",
                  "policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl"]


@dataclass
class TrainerConfig:
    world_configs: list[WorldConfig]
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    toggles: ObservationToggles = field(default_factory=ObservationToggles)
    seed: int = 0

    def meta(self) -> dict:
        return {
            "worlds": [w.to_json() for w in self.world_configs],
            "ppo": asdict(self.ppo),
            "reward": asdict(self.reward),
            "toggles": asdict(self.toggles),
            "seed": self.seed,
        }


def config_hash(meta: dict) -> str:
    import hashlib
    import json
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]


def train(config: TrainerConfig, checkpoint_path=None, metrics_path=None,
          resume_from=None, log=print) -> tuple[PolicyParams, RunningNorm, list[dict]]:
    """Run PPO until total_steps, writing metrics rows and checkpoints.

    Each environment is bound to one world config (cycled when there are more
    envs than worlds) and replays it every episode; backend noise streams keep
    advancing, so episodes differ while staying reproducible from the master
    seed. Resuming restores parameters, normalizer, and the step counter.
    """
    ppo = config.ppo
    seed = config.seed % 2**32
    obs_dim = observation_size(config.world_configs[0].token_dim, 8)
    priv_dim = obs_dim + 8 + ppo.horizon

    if resume_from is not None:
        params, norm, meta = agent_mod.load_checkpoint(resume_from)
        global_step = int(meta.get("step", 0))
    else:
        params = agent_mod.init_policy(np.random.default_rng([seed, 0]),
                                       obs_dim, priv_dim, ppo.hidden)
        norm = RunningNorm(6 * 8)
        global_step = 0

    sample_rng = np.random.default_rng([seed, 1])
    shuffle_rng = np.random.default_rng([seed, 2])
    envs = []
    for i in range(ppo.n_envs):
        world = generate_world(config.world_configs[i % len(config.world_configs)])
        envs.append(VoEnvironment(world, config.reward, ppo, norm, config.toggles,
                                  base_seed=seed + i, training=True))

    opt = Adam(params.flat())
    meta = config.meta()
    rows: list[dict] = []
    update_idx = 0
    while global_step < ppo.total_steps:
        lr = lr_schedule(global_step, ppo.total_steps, ppo.lr_start, ppo.lr_end)
        buf = rollout(envs, params, ppo, sample_rng)
        adv, ret = gae_advantages(buf, ppo.gamma, ppo.gae_lambda)
        batch = buf.flatten(adv, ret)
        stats = ppo_update(params, opt, batch, ppo, lr, shuffle_rng)
        global_step += ppo.rollout_len * ppo.n_envs
        update_idx += 1

        valid = buf.valid
        row = {
            "update": update_idx,
            "step": global_step,
            "lr": lr,
            "mean_reward": float(buf.rewards[valid].mean()) if valid.any() else 0.0,
            "keyframe_rate": float((buf.actions[valid] == 0).mean()) if valid.any() else 0.0,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
        }
        rows.append(row)
        if log is not None:
            log(f"update {update_idx}: step={global_step} reward={row['mean_reward']:.6f} "
                f"kf_rate={row['keyframe_rate']:.3f} lr={lr:.2e}")
        if checkpoint_path is not None and (
                update_idx % ppo.checkpoint_every == 0 or global_step >= ppo.total_steps):
            ckpt_meta = {"step": global_step, "config_hash": config_hash(meta), **meta}
            agent_mod.save_checkpoint(checkpoint_path, params, norm, ckpt_meta)
        if metrics_path is not None:
            with open(metrics_path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
                writer.writeheader()
                writer.writerows(rows)
    return params, norm, rows
