"""Compound memory: fixed + dynamic template store and a FIFO box trajectory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox

TRAJECTORY_CAPACITY = 7


@dataclass
class TrajectoryMemory:
    """FIFO of the most recent predicted boxes, oldest first."""

    capacity: int = TRAJECTORY_CAPACITY
    boxes: list = field(default_factory=list)

    def push(self, box: BoundingBox):
        if not box.is_canonical():
            raise ValueError("trajectory boxes must be canonical")
        self.boxes.append(box)
        if len(self.boxes) > self.capacity:
            del self.boxes[: len(self.boxes) - self.capacity]

    def as_list(self) -> list:
        return list(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)


def traj_push(mem: TrajectoryMemory, box: BoundingBox) -> TrajectoryMemory:
    mem.push(box)
    return mem


def update_interval(t: int) -> int:
    """Template-update interval: 5 within the first 100 frames, doubling per
    100-frame band up to frame 500, then fixed at 160."""
    if t < 1:
        raise ValueError("frame index must be >= 1")
    if t > 500:
        return 160
    band = (t - 1) // 100  # 0..4
    return 5 * (2 ** band)


@dataclass
class VisualMemory:
    """One never-evicted fixed template plus a FIFO of dynamic templates.

    Updates are gated collaboratively: both the predicted IoU score s1 and the
    decode confidence s2 must clear their thresholds, and at least
    update_interval(t) frames must have passed since the last accepted update.
    """

    fixed_template: np.ndarray | None = None
    dynamic: list = field(default_factory=list)
    n_dynamic: int = 2
    sigma1: float = 0.75
    sigma2: float = 0.9
    last_update_frame: int = 0

    def initialize(self, template: np.ndarray, frame_index: int = 1):
        self.fixed_template = template
        self.dynamic = []
        self.last_update_frame = frame_index

    @property
    def initialized(self) -> bool:
        return self.fixed_template is not None

    def templates_view(self) -> list:
        """[fixed, dynamic oldest -> newest]; its length is the template count n."""
        if not self.initialized:
            raise ValueError("visual memory not initialized")
        return [self.fixed_template] + list(self.dynamic)

    def maybe_update(self, t: int, candidate: np.ndarray, s1: float, s2: float,
                     mode: str = "gated") -> bool:
        if mode not in ("gated", "direct"):
            raise ValueError("update mode must be 'gated' or 'direct'")
        if not self.initialized:
            raise ValueError("visual memory not initialized")
        if self.n_dynamic < 1:
            return False
        if t - self.last_update_frame < update_interval(t):
            return False
        if mode == "gated" and not (s1 > self.sigma1 and s2 > self.sigma2):
            return False
        self.dynamic.append(candidate)
        if len(self.dynamic) > self.n_dynamic:
            del self.dynamic[0]
        self.last_update_frame = t
        return True


def maybe_update_visual(mem: VisualMemory, t: int, candidate_crop: np.ndarray,
                        s1: float, s2: float, mode: str = "gated") -> tuple[VisualMemory, bool]:
    updated = mem.maybe_update(t, candidate_crop, s1, s2, mode)
    return mem, updated


def templates_view(mem: VisualMemory) -> list:
    return mem.templates_view()
