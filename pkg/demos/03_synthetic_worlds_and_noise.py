"""Synthetic worlds and the parallax-aware noise model.

The backend's error grows as the mean inter-frame baseline shrinks: windows
full of near-stationary frames produce poor pose estimates, which is exactly
the redundancy a keyframe policy should learn to remove.

Run: python3 demos/03_synthetic_worlds_and_noise.py
"""

import numpy as np

from kfvo.backend import (BackendRequest, NoiseParams, WorldConfig, generate_world,
                          noise_sigma, synthetic_process)
from kfvo.geometry import relative_pose

print("== motion profiles ==")
for profile in ("orbit", "corridor", "stop-and-go", "random-walk"):
    world = generate_world(WorldConfig(length=120, profile=profile, seed=3))
    steps = np.linalg.norm(np.diff(world.trajectory.positions(), axis=0), axis=1)
    print(f"  {profile:12s} path {steps.sum():6.2f} m, "
          f"step mean {steps.mean():.3f} m, stationary {100 * (steps < 1e-6).mean():.0f}%")

print("\n== noise law: sigma vs mean window baseline ==")
noise = NoiseParams()
for b in (0.0, 0.01, 0.05, 0.12, 0.5):
    print(f"  baseline {b:5.2f} m -> translation noise std {noise_sigma(noise, b):.4f} m")

print("\n== measured: stationary vs moving windows (stop-and-go world) ==")
world = generate_world(WorldConfig(length=200, profile="stop-and-go", seed=5))
steps = np.linalg.norm(np.diff(world.trajectory.positions(), axis=0), axis=1)
stationary_start = next(i for i in range(150) if (steps[i:i + 7] < 1e-6).all())
moving_start = next(i for i in range(150) if (steps[i:i + 7] > 0.05).all())

for name, start in (("moving", moving_start), ("stationary", stationary_start)):
    errs = []
    for _ in range(300):
        ids = list(range(start, start + 8))
        resp = synthetic_process(world, BackendRequest(ids))
        gt_rel = relative_pose(world.gt_pose(ids[0]), world.gt_pose(ids[-1]))
        errs.append(np.linalg.norm(resp.rel_poses[-1].t - gt_rel.t))
    print(f"  {name:10s} window: mean |pose error| {np.mean(errs):.4f} m")
print("low-parallax windows are measurably worse; keyframing fixes the input.")
