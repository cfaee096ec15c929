"""Sequence runner: drive a backend with a keyframe strategy, collect results.

Strategies:

* keep-all  -- every incoming frame becomes a keyframe (the sliding-window
  baseline).
* threshold -- keyframe iff the estimated translation from the most recent
  keyframe exceeds tau meters (the displacement analog of optical-flow
  threshold rules, usable without pixel data).
* policy    -- the trained agent, run deterministically (argmax) with frozen
  observation statistics.

The runner logs one decision record per policy step (action, aligned window
error when ground truth is available, and the decision wall time in
nanoseconds, covering only the forward pass and action selection).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .agent import ObservationToggles, PolicyParams, RunningNorm, actor_forward, build_observation
from .backend import BackendRequest, SyntheticWorld
from .geometry import Rigid3, Trajectory, relative_pose
from .rl import ACTIONS, window_translation_error
from .window import (Action, Frame, GlobalMap, WindowState, apply_action,
                     apply_backend, finalize_trajectory, push_frame)


@dataclass
class FrameInput:
    id: int
    ref: str
    timestamp: float
    gt_pose: Rigid3 | None = None


@dataclass
class DecisionRecord:
    frame_id: int
    action: str
    e_tran: float | None
    latency_ns: int


@dataclass
class RunResult:
    trajectory: Trajectory
    decisions: list[DecisionRecord]

    @property
    def keyframe_rate(self) -> float:
        if not self.decisions:
            return 1.0
        kept = sum(1 for d in self.decisions if d.action == Action.KEYFRAME.value)
        return kept / len(self.decisions)


class KeepAllStrategy:
    name = "sw"

    def decide(self, window: WindowState, gmap: GlobalMap, response) -> tuple[Action, int]:
        start = time.perf_counter_ns()
        return Action.KEYFRAME, time.perf_counter_ns() - start


class ThresholdStrategy:
    name = "threshold"

    def __init__(self, tau: float):
        if tau <= 0:
            raise ValueError(f"threshold tau must be positive, got {tau}")
        self.tau = tau

    def decide(self, window: WindowState, gmap: GlobalMap, response) -> tuple[Action, int]:
        start = time.perf_counter_ns()
        parent = None
        for f in reversed(window.frames[:-1]):
            if gmap.keyframe_flags.get(f.id):
                parent = f
                break
        rel = relative_pose(window.latest_rel_poses[parent.id],
                            window.latest_rel_poses[window.newest.id])
        action = Action.KEYFRAME if np.linalg.norm(rel.t) > self.tau else Action.DISCARD
        return action, time.perf_counter_ns() - start


class PolicyStrategy:
    name = "policy"

    def __init__(self, params: PolicyParams, norm: RunningNorm,
                 toggles: ObservationToggles = ObservationToggles()):
        self.params = params
        self.norm = norm
        self.toggles = toggles

    def decide(self, window: WindowState, gmap: GlobalMap, response) -> tuple[Action, int]:
        obs = build_observation(window, response, self.norm, self.toggles,
                                update_norm=False)
        start = time.perf_counter_ns()
        logits = actor_forward(self.params, obs)
        action = ACTIONS[int(np.argmax(logits))]
        return action, time.perf_counter_ns() - start


def frames_from_world(world: SyntheticWorld) -> list[FrameInput]:
    return [FrameInput(i, str(i), t, pose)
            for i, (t, pose) in enumerate(world.trajectory.entries)]


def run_sequence(backend, frames: list[FrameInput], strategy,
                 window_capacity: int = 8, k_align: int = 4) -> RunResult:
    """Feed every frame through the window pipeline under one strategy.

    The backend is invoked once per pushed frame on the window contents at
    that instant. The returned trajectory covers every input frame exactly
    once.
    """
    window = WindowState(capacity=window_capacity)
    gmap = GlobalMap()
    decisions: list[DecisionRecord] = []
    timestamps: dict[int, float] = {}
    refs = {f.id: f.ref for f in frames}
    have_gt = all(f.gt_pose is not None for f in frames)

    for fi in frames:
        timestamps[fi.id] = fi.timestamp
        push_frame(window, Frame(fi.id, fi.timestamp, gt_pose=fi.gt_pose), gmap)
        request = BackendRequest([f.id for f in window.frames],
                                 [refs[f.id] for f in window.frames])
        response = backend.process(request)
        apply_backend(window, response, gmap)
        if window.is_full():
            action, latency = strategy.decide(window, gmap, response)
            apply_action(window, gmap, action)
            e_tran = None
            if have_gt:
                e_tran, _ = window_translation_error(window, gmap, k_align)
            decisions.append(DecisionRecord(fi.id, action.value, e_tran, latency))
    return RunResult(finalize_trajectory(gmap, timestamps), decisions)
