"""Keyframe-policy feed-forward visual odometry.

A sliding-window anchor-frame pose estimator with a learned binary keyframe
policy trained by PPO against a pluggable multi-view backend, plus trajectory
I/O and ATE evaluation tooling.
"""

from .geometry import Rigid3, Sim3, Trajectory, ate_rmse, compose, relative_pose, umeyama_align

__all__ = [
    "Rigid3",
    "Sim3",
    "Trajectory",
    "ate_rmse",
    "compose",
    "relative_pose",
    "umeyama_align",
]

__version__ = "0.1.0"
