"""Sliding-window state machine: anchor bookkeeping and global pose chaining.

The window holds up to `capacity` frames; its first frame is the anchor, whose
global pose is already known. Every pushed frame triggers a backend call that
returns anchor-relative poses, which are chained through the anchor into
global estimates (last write wins, so re-estimates from newer windows with
fresher anchors overwrite older ones). Once the window is full, each new frame
gets a keep/discard decision:

* Keyframe: the anchor retires, the second frame becomes the new anchor, and
  a slot opens on the right.
* Discard: the newest frame leaves the window immediately; only its relative
  pose to the most recent keyframe is kept, so its final global pose tracks
  any later refinement of that keyframe.

Frames pushed while the window is still filling (the initialization phase) are
keyframed directly without a decision.

A WindowState/GlobalMap pair is single-owner and mutated sequentially.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .backend import BackendResponse
from .geometry import Rigid3, Trajectory, compose, relative_pose


class WindowFull(RuntimeError):
    """push_frame called on a full window (driver skipped the action)."""


class MissingFrame(RuntimeError):
    """Backend response does not cover every window frame."""


class NotReady(RuntimeError):
    """Action requested before the window is full or on a stale response."""


class IncompleteMap(RuntimeError):
    """A frame could not be resolved when assembling the final trajectory."""


class Action(enum.Enum):
    KEYFRAME = "keyframe"
    DISCARD = "discard"


@dataclass
class Frame:
    id: int
    timestamp: float
    token: np.ndarray | None = None
    gt_pose: Rigid3 | None = None  # training only


@dataclass
class WindowState:
    capacity: int = 8
    frames: list[Frame] = field(default_factory=list)
    latest_rel_poses: dict[int, Rigid3] = field(default_factory=dict)
    response_fresh: bool = False

    @property
    def anchor(self) -> Frame:
        return self.frames[0]

    @property
    def newest(self) -> Frame:
        return self.frames[-1]

    def is_full(self) -> bool:
        return len(self.frames) == self.capacity


@dataclass
class GlobalMap:
    global_poses: dict[int, Rigid3] = field(default_factory=dict)
    keyframe_flags: dict[int, bool] = field(default_factory=dict)
    nonkey_offsets: dict[int, tuple[int, Rigid3]] = field(default_factory=dict)

    def keyframe_ids(self) -> list[int]:
        return [fid for fid, flag in self.keyframe_flags.items() if flag]


def push_frame(state: WindowState, frame: Frame, gmap: GlobalMap) -> None:
    """Append a frame at the right end of the window.

    The first pushed frame becomes the origin of the global coordinate system.
    Frames pushed before the window first fills are keyframed directly
    (initialization); from then on a slot is only free right after an action.
    """
    if state.is_full():
        raise WindowFull(f"window already holds {state.capacity} frames")
    state.frames.append(frame)
    state.response_fresh = False
    if not gmap.global_poses:
        gmap.global_poses[frame.id] = Rigid3.identity()
    if not state.is_full():
        gmap.keyframe_flags[frame.id] = True


def apply_backend(state: WindowState, response: BackendResponse, gmap: GlobalMap) -> None:
    """Chain anchor-relative poses into global estimates (last write wins)."""
    rel = dict(zip(response.frame_ids, response.rel_poses))
    for f in state.frames:
        if f.id not in rel:
            raise MissingFrame(f"response missing window frame {f.id}")
    anchor_global = gmap.global_poses[state.anchor.id]
    for f in state.frames:
        gmap.global_poses[f.id] = compose(anchor_global, rel[f.id])
    state.latest_rel_poses = {f.id: rel[f.id] for f in state.frames}
    tokens = dict(zip(response.frame_ids, response.tokens))
    for f in state.frames:
        f.token = tokens[f.id]
    state.response_fresh = True


def _most_recent_keyframe(state: WindowState, gmap: GlobalMap) -> Frame:
    for f in reversed(state.frames):
        if gmap.keyframe_flags.get(f.id):
            return f
    raise NotReady("no keyframe in window to anchor a discard against")


def apply_action(state: WindowState, gmap: GlobalMap, action: Action) -> None:
    """Execute the keep/discard decision for the newest frame."""
    if not state.is_full():
        raise NotReady(f"window has {len(state.frames)}/{state.capacity} frames")
    if not state.response_fresh:
        raise NotReady("no backend response for the current window contents")

    if action is Action.KEYFRAME:
        gmap.keyframe_flags[state.newest.id] = True
        state.frames.pop(0)
    else:
        newest = state.frames.pop()
        parent = _most_recent_keyframe(state, gmap)
        offset = relative_pose(state.latest_rel_poses[parent.id],
                               state.latest_rel_poses[newest.id])
        gmap.nonkey_offsets[newest.id] = (parent.id, offset)
        gmap.global_poses.pop(newest.id, None)
    state.response_fresh = False


def finalize_trajectory(gmap: GlobalMap, timestamps: dict[int, float]) -> Trajectory:
    """Assemble the per-frame trajectory, resolving discards lazily.

    Non-keyframes are resolved as parent_global o offset at this point, so any
    refinement of the parent keyframe after the discard propagates. Output is
    ordered by timestamp and covers every id in `timestamps`.
    """
    entries = []
    for fid, ts in timestamps.items():
        if fid in gmap.nonkey_offsets:
            parent, offset = gmap.nonkey_offsets[fid]
            if parent not in gmap.global_poses:
                raise IncompleteMap(f"frame {fid} parent keyframe {parent} unresolved")
            pose = compose(gmap.global_poses[parent], offset)
        elif fid in gmap.global_poses:
            pose = gmap.global_poses[fid]
        else:
            raise IncompleteMap(f"frame {fid} has no pose estimate or offset record")
        entries.append((ts, pose))
    entries.sort(key=lambda e: e[0])
    return Trajectory(entries)
