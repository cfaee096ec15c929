"""Train a small keyframe policy and race it against the baselines.

A shortened version of the full training recipe (~1 minute of CPU): PPO over
stop-and-go worlds where redundant stationary frames degrade the backend.
Expect the learned policy to discard a third or more of the frames and to
beat the keep-everything baseline on held-out worlds.

Run: python3 demos/04_train_keyframe_policy.py
"""

import numpy as np

from kfvo.agent import ObservationToggles
from kfvo.backend import WorldConfig, generate_world
from kfvo.geometry import ate_rmse
from kfvo.rl import PpoConfig, RewardParams, TrainerConfig, train
from kfvo.run import (KeepAllStrategy, PolicyStrategy, ThresholdStrategy,
                      frames_from_world, run_sequence)

worlds = [WorldConfig(length=150, profile="stop-and-go", seed=s) for s in range(20)]
ppo = PpoConfig(n_envs=20, rollout_len=128, total_steps=30_000)
config = TrainerConfig(worlds, ppo, RewardParams(), ObservationToggles(), seed=42)

print("training 30k steps on 20 stop-and-go worlds...")
params, norm, rows = train(config, log=None)
print(f"  {len(rows)} updates, final keyframe rate while exploring: "
      f"{rows[-1]['keyframe_rate']:.2f}")

strategies = {
    "policy (learned)": PolicyStrategy(params, norm),
    "sw (keep all)": KeepAllStrategy(),
    "threshold 0.05m": ThresholdStrategy(0.05),
}

print("\nheld-out evaluation (Sim3-aligned ATE, lower is better):")
totals = {name: [] for name in strategies}
rates = {name: [] for name in strategies}
for seed in range(100, 105):
    wc = WorldConfig(length=150, profile="stop-and-go", seed=seed)
    line = [f"world {seed}:"]
    for name, strategy in strategies.items():
        world = generate_world(wc)
        result = run_sequence(world, frames_from_world(world), strategy)
        ate = ate_rmse(result.trajectory, world.trajectory, alignment="sim3")
        totals[name].append(ate)
        rates[name].append(result.keyframe_rate)
        line.append(f"{name.split()[0]}={ate:.4f}")
    print("  " + "  ".join(line))

print("\naverages:")
for name in strategies:
    print(f"  {name:18s} ATE {np.mean(totals[name]):.4f} m, "
          f"keyframe rate {np.mean(rates[name]):.2f}")
