"""Value types shared across the package.

Boxes are center-based ``(x, y, w, h)`` in image-plane pixels. Sequences of
boxes are kept as ``(L, 4)`` float arrays; :class:`BoundingBox` and
:class:`BoxVelocity` are the scalar views used at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class InvalidSequenceError(ValueError):
    pass


class BoundingBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        """Convert a ``(left, top, right, bottom)`` annotation to centre form."""
        if x2 < x1 or y2 < y1:
            raise InvalidSequenceError(f"corners out of order: {(x1, y1, x2, y2)}")
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)


class BoxVelocity(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def as_box_array(boxes) -> np.ndarray:
    """Coerce a sequence of boxes (or an array) into a float64 ``(L, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 4:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidSequenceError(f"expected boxes of shape (L, 4), got {arr.shape}")
    return arr


def compute_velocities(positions) -> np.ndarray:
    """Per-frame box differences with a leading zero row.

    ``out[0] == 0`` and ``out[t] == positions[t] - positions[t-1]``.
    """
    pos = as_box_array(positions)
    if pos.shape[0] < 2:
        raise InvalidSequenceError(f"need at least 2 positions, got {pos.shape[0]}")
    vel = np.zeros_like(pos)
    vel[1:] = pos[1:] - pos[:-1]
    return vel


def boxes_to_list(arr: np.ndarray) -> list[BoundingBox]:
    return [BoundingBox(*map(float, row)) for row in np.asarray(arr)]


def velocities_to_list(arr: np.ndarray) -> list[BoxVelocity]:
    return [BoxVelocity(*map(float, row)) for row in np.asarray(arr)]


@dataclass(frozen=True)
class PastTrajectory:
    positions: np.ndarray  # (m, 4)
    velocities: np.ndarray  # (m, 4)

    @classmethod
    def from_positions(cls, positions) -> "PastTrajectory":
        pos = as_box_array(positions)
        return cls(pos, compute_velocities(pos))

    @property
    def m(self) -> int:
        return int(self.positions.shape[0])

    def features(self) -> np.ndarray:
        """Per-step ``[x, y, w, h, dx, dy, dw, dh]`` rows."""
        return np.concatenate([self.positions, self.velocities], axis=1)


@dataclass(frozen=True)
class LocalContext:
    pedestrian_attrs: np.ndarray  # (P,)
    behavior_attrs: np.ndarray  # (m, B), entries in {0, 1}
    scene_attrs: Optional[np.ndarray] = None  # (m, S) or None when not annotated


@dataclass(frozen=True)
class GlobalContext:
    images: np.ndarray  # (m, 3, H, W)
    flows: np.ndarray  # (m - 1, 2, H, W)


@dataclass(frozen=True)
class PedestrianSample:
    past: PastTrajectory
    local: LocalContext
    global_ctx: GlobalContext
    future_boxes: np.ndarray  # (n, 4)
    future_intentions: np.ndarray  # (n,) in {0, 1}
    pedestrian_id: str = ""
    video_id: str = ""
    anchor_frame: int = 0
    image_dims: tuple[int, int] = (240, 420)
    # index of the anchor inside its source track and that track's length,
    # when known; used for the provenance check in validate_sample
    anchor_index: Optional[int] = None
    track_length: Optional[int] = None

    @property
    def m(self) -> int:
        return self.past.m

    @property
    def n(self) -> int:
        return int(self.future_boxes.shape[0])

    @property
    def last_box(self) -> np.ndarray:
        return self.past.positions[-1]


@dataclass(frozen=True)
class PredictionOutput:
    boxes: np.ndarray  # (n, 4)
    intention_probs: np.ndarray  # (n,)

    def __post_init__(self):
        if self.boxes.shape[0] != self.intention_probs.shape[0]:
            raise ValueError("boxes and intention_probs lengths differ")
        p = self.intention_probs
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("intention probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    reason: Optional[str] = None
    details: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


def _reject(reason: str, **details) -> ValidationResult:
    return ValidationResult(False, reason, details)


def _boxes_problem(boxes: np.ndarray) -> Optional[str]:
    if not np.all(np.isfinite(boxes)):
        return "non-finite box"
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        return "degenerate box"
    return None


def validate_sample(sample: PedestrianSample, m: int, n: int) -> ValidationResult:
    """Check every structural invariant of ``sample``; report the first violation."""
    pos = np.asarray(sample.past.positions)
    vel = np.asarray(sample.past.velocities)
    if pos.ndim != 2 or pos.shape[1] != 4 or vel.shape != pos.shape:
        return _reject("trajectory shape", positions=pos.shape, velocities=vel.shape)
    if m < 2 or pos.shape[0] != m:
        return _reject("past length mismatch", expected=m, got=pos.shape[0])
    problem = _boxes_problem(pos)
    if problem:
        return _reject(problem, where="past")
    if not np.all(np.isfinite(vel)):
        return _reject("non-finite velocity")
    if np.any(vel[0] != 0) or not np.allclose(vel[1:], pos[1:] - pos[:-1], rtol=0, atol=1e-9):
        return _reject("velocity inconsistent with positions")

    local = sample.local
    beh = np.asarray(local.behavior_attrs)
    if beh.ndim != 2 or beh.shape[0] != m:
        return _reject("behavior length mismatch", shape=beh.shape)
    if not np.all((beh == 0) | (beh == 1)):
        return _reject("behavior not binary")
    if local.scene_attrs is not None:
        scene = np.asarray(local.scene_attrs)
        if scene.ndim != 2 or scene.shape[0] != m:
            return _reject("scene length mismatch", shape=scene.shape)
        if not np.all(np.isfinite(scene)):
            return _reject("non-finite scene attributes")
    if np.asarray(local.pedestrian_attrs).ndim != 1:
        return _reject("pedestrian attributes not a vector")

    g = sample.global_ctx
    imgs, flows = g.images, g.flows
    if imgs.ndim != 4 or imgs.shape[0] != m or imgs.shape[1] != 3:
        return _reject("image stack shape", shape=imgs.shape)
    if flows.ndim != 4 or flows.shape[1] != 2:
        return _reject("flow stack shape", shape=flows.shape)
    if flows.shape[0] != imgs.shape[0] - 1:
        return _reject("flow count mismatch", images=imgs.shape[0], flows=flows.shape[0])
    if flows.shape[2:] != imgs.shape[2:]:
        return _reject("global context dims mismatch")
    if not (np.all(np.isfinite(imgs)) and np.all(np.isfinite(flows))):
        return _reject("non-finite global context")

    fut = np.asarray(sample.future_boxes)
    lab = np.asarray(sample.future_intentions)
    if n < 1 or fut.ndim != 2 or fut.shape != (n, 4):
        return _reject("future length mismatch", expected=n, got=fut.shape)
    if lab.shape != (n,):
        return _reject("intention length mismatch", expected=n, got=lab.shape)
    problem = _boxes_problem(fut)
    if problem:
        return _reject(problem, where="future")
    if not np.all((lab == 0) | (lab == 1)):
        return _reject("intention labels not binary")
    if sample.anchor_index is not None and sample.track_length is not None:
        if sample.anchor_index + n >= sample.track_length:
            return _reject("window exceeds track")
    return ValidationResult(True)
