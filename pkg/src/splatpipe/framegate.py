"""Information-gated keyframe selection.

Frames must move at least ``tau_d`` meters from the last committed keyframe
to be considered at all; candidates then compete inside a short temporal
window on a cheap sharpness score, and the window commits its best frame
when it fills up or times out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Frame, PoseSE3


@dataclass
class GateConfig:
    tau_d: float = 0.05  # displacement gate, meters
    window_len: int = 8  # max candidates per window
    window_time: float = 0.25  # max window span, seconds
    r: float = 0.05  # replacement margin
    grid: int = 160  # sharpness sample lattice (grid x grid)
    delta: int = 2  # luma difference step, pixels

    def __post_init__(self):
        if self.tau_d <= 0 or self.window_len < 1 or self.r < 0:
            raise ValueError("invalid gate config")


@dataclass
class KeyframeSet:
    selected_ids: list  # ascending frame ids
    scores: dict  # frame id -> sharpness, for every frame that entered a window
    n_rejected_displacement: int = 0
    n_rejected_blur: int = 0

    @property
    def n_accepted(self) -> int:
        return len(self.selected_ids)


def displacement(curr: PoseSE3, last: PoseSE3) -> float:
    """Euclidean distance between the two camera centers, meters."""
    return float(np.linalg.norm(curr.center() - last.center()))


def sharpness(frame: Frame, cfg: GateConfig) -> float:
    """Mean absolute luma difference at step ``delta`` over a sparse sample grid.

    Samples whose +delta neighbor falls outside the image are dropped from
    the normalization.
    """
    luma = frame.luma
    h, w = luma.shape
    d = cfg.delta
    xs = np.unique(np.linspace(0, w - 1, min(cfg.grid, w)).round().astype(int))
    ys = np.unique(np.linspace(0, h - 1, min(cfg.grid, h)).round().astype(int))
    xs = xs[xs + d < w]
    ys = ys[ys + d < h]
    if len(xs) == 0 or len(ys) == 0:
        return 0.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    center = luma[gy, gx]
    s = np.abs(luma[gy, gx + d] - center) + np.abs(luma[gy + d, gx] - center)
    return float(s.mean())


def select_keyframes(frames: list[Frame], cfg: GateConfig | None = None) -> KeyframeSet:
    """Streaming selection over timestamp-ordered frames.

    Frames passing the displacement gate against the last committed keyframe
    enter the current candidate window. A candidate replaces the window's
    best only if S_new > (1 + r) * S_best. The window commits its best once
    it holds ``window_len`` candidates or a gated candidate arrives more
    than ``window_time`` seconds after the window opened, whichever happens
    first; the stream end commits any open window.
    """
    cfg = cfg or GateConfig()
    result = KeyframeSet(selected_ids=[], scores={})
    last_pose: PoseSE3 | None = None

    best: Frame | None = None
    best_score = 0.0
    window_start = 0.0
    window_count = 0

    def commit():
        nonlocal best, window_count, last_pose
        if best is None:
            return
        result.selected_ids.append(best.id)
        last_pose = best.coarse_pose
        best = None
        window_count = 0

    for frame in frames:
        if last_pose is not None and displacement(frame.coarse_pose, last_pose) < cfg.tau_d:
            result.n_rejected_displacement += 1
            continue
        if best is not None and frame.timestamp - window_start > cfg.window_time:
            commit()
            # the frame that closed the window must pass the gate against
            # the keyframe it just created
            if displacement(frame.coarse_pose, last_pose) < cfg.tau_d:
                result.n_rejected_displacement += 1
                continue
        score = sharpness(frame, cfg)
        result.scores[frame.id] = score
        if best is None:
            best, best_score, window_start, window_count = frame, score, frame.timestamp, 1
        else:
            window_count += 1
            if score > (1.0 + cfg.r) * best_score:
                best, best_score = frame, score
        if window_count >= cfg.window_len:
            commit()
    commit()

    result.n_rejected_blur = len(result.scores) - len(result.selected_ids)
    return result
