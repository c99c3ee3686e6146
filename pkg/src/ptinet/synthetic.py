"""Deterministic synthetic street scenes with analytic optical flow.

A scene is a textured background translating with the ego vehicle, a road
below a curb line, and pedestrians drawn as filled rectangles walking along
the sidewalk. A crossing pedestrian goes through four timestamps:

* ``t_precursor``: its fill colour switches to the "attentive" colour;
* ``t_cue = t_switch - cue_lead``: "looking" turns on (noisily) and the flow
  inside its box carries a zero-mean vertical shear that grows linearly until
  the turn;
* ``t_switch``: intention labels become 1;
* ``t_turn = t_switch + lead``: it turns toward the road and keeps crossing.

Behaviour and flow therefore announce the label switch ``cue_lead`` frames
ahead, and the colour (visible only in the images) earlier still. Non-crossing
pedestrians never change colour, never turn and carry no shear.
Everything is a closed-form function of time, so frames and flow can be
rendered at any raster size without resampling.
"""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import FeatureToggles
from .data import (DEFAULT_VOCAB, AttributeVocabulary, PedestrianTrack, TrackFrames, build_samples,
                   write_flow, write_tracks)
from .domain import BoundingBox, GlobalContext, PedestrianSample

NORMAL_COLOR = np.array([0.15, 0.35, 0.85])
ATTENTIVE_COLOR = np.array([0.95, 0.55, 0.10])
SHEAR_AMPLITUDE = 1.0


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    num_pedestrians: int = 1
    frames_per_track: int = 64
    image_dims: tuple[int, int] = (240, 420)
    crossing_fraction: float = 0.5
    ego_speed: tuple[float, float] = (-1.0, 0.0)
    noise_std: float = 1.0
    seed: int = 0
    lead: int = 15
    cue_lead: int = 8
    with_scene: bool = True

    def __post_init__(self):
        if not 0.0 <= self.crossing_fraction <= 1.0:
            raise GenerationError("crossing_fraction must lie in [0, 1]")
        if self.num_pedestrians < 1:
            raise GenerationError("need at least one pedestrian")
        if self.frames_per_track < 2:
            raise GenerationError("frames_per_track must be at least 2")
        if self.lead < 1:
            raise GenerationError("lead must be at least 1")
        if self.cue_lead < 0:
            raise GenerationError("cue_lead must be nonnegative")
        if self.noise_std < 0:
            raise GenerationError("noise_std must be nonnegative")
        if min(self.image_dims) < 32:
            raise GenerationError("image_dims too small")


@dataclass(frozen=True)
class PedestrianPlan:
    """Ground-truth kinematics and phase timestamps of one pedestrian."""

    pedestrian_id: str
    crossing: bool
    t_precursor: Optional[int]
    t_cue: Optional[int]
    t_switch: Optional[int]
    t_turn: Optional[int]
    clean_boxes: np.ndarray  # (L, 4) noise-free boxes
    color: np.ndarray  # base fill colour

    def label(self, t: int) -> int:
        return int(self.crossing and t >= self.t_switch)

    def attentive(self, t: int) -> bool:
        return self.crossing and t >= self.t_precursor

    def cueing(self, t: int) -> bool:
        """Inside the lead window, where behaviour and flow announce the crossing."""
        return self.crossing and self.t_cue <= t < self.t_turn

    def shear(self, t: int) -> float:
        """Amplitude of the zero-mean flow pattern inside the box between t and t+1."""
        if not self.cueing(t):
            return 0.0
        return SHEAR_AMPLITUDE * (t - self.t_cue + 1) / (self.t_turn - self.t_cue)

    def phases(self) -> dict:
        return {
            "pedestrian_id": self.pedestrian_id,
            "crossing": self.crossing,
            "t_precursor": self.t_precursor,
            "t_cue": self.t_cue,
            "t_switch": self.t_switch,
            "t_turn": self.t_turn,
        }


def _texture(x: np.ndarray, y: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return (
        0.45
        + 0.12 * np.sin(2 * np.pi * x / 31.0 + phase[0])
        + 0.08 * np.sin(2 * np.pi * (x + y) / 17.0 + phase[1])
        + 0.06 * np.sin(2 * np.pi * y / 23.0 + phase[2])
    )


@dataclass
class Scenario:
    config: ScenarioConfig
    video_id: str
    plans: list[PedestrianPlan]
    tracks: list[PedestrianTrack]
    texture_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def length(self) -> int:
        return self.config.frames_per_track

    def _grid(self, dims):
        h_src, w_src = self.config.image_dims
        rh, rw = dims
        ys = (np.arange(rh) + 0.5) * h_src / rh
        xs = (np.arange(rw) + 0.5) * w_src / rw
        return ys, xs

    def _ego_offset(self, t: int) -> tuple[float, float]:
        ex, ey = self.config.ego_speed
        return ex * t, ey * t

    def _box_mask(self, box: np.ndarray, ys: np.ndarray, xs: np.ndarray):
        x, y, w, h = box
        rows = np.abs(ys - y) <= h / 2
        cols = np.abs(xs - x) <= w / 2
        return rows, cols

    def render_frame(self, t: int, dims: Optional[Sequence[int]] = None) -> np.ndarray:
        """``(3, H, W)`` float32 in [0, 1], quantized to 8 bits."""
        dims = tuple(dims or self.config.image_dims)
        ys, xs = self._grid(dims)
        ox, oy = self._ego_offset(t)
        xx, yy = np.meshgrid(xs - ox, ys - oy)
        val = _texture(xx, yy, self.texture_phase)
        curb = 0.625 * self.config.image_dims[0]
        val = np.where(yy > curb, val * 0.55, val)
        img = np.stack([val, val, val * 0.95])
        for plan in self.plans:
            rows, cols = self._box_mask(plan.clean_boxes[t], ys, xs)
            color = ATTENTIVE_COLOR if plan.attentive(t) else plan.color
            region = np.ix_(rows, cols)
            for c in range(3):
                img[c][region] = color[c]
        img = np.clip(img, 0.0, 1.0)
        return (np.round(img * 255) / 255).astype(np.float32)

    def frame_uint8(self, t: int) -> np.ndarray:
        return np.round(self.render_frame(t) * 255).astype(np.uint8).transpose(1, 2, 0)

    def flow(self, t: int, dims: Optional[Sequence[int]] = None) -> np.ndarray:
        return analytic_flow(self, t, dims)

    def track_frames(self, dims: Optional[Sequence[int]] = None, use_images: bool = True,
                     use_flow: bool = True) -> TrackFrames:
        dims = tuple(dims or self.config.image_dims)
        L = self.length
        if use_images:
            images = np.stack([self.render_frame(t, dims) for t in range(L)])
        else:
            images = np.zeros((L, 3, *dims), dtype=np.float32)
        if use_flow:
            flows = np.stack([analytic_flow(self, t, dims) for t in range(L - 1)])
        else:
            flows = np.zeros((L - 1, 2, *dims), dtype=np.float32)
        return TrackFrames(images, flows)


def analytic_flow(scenario: Scenario, t: int, dims: Optional[Sequence[int]] = None) -> np.ndarray:
    """Flow ``(2, H, W)`` from frame t to t+1 in raster pixels.

    Background carries the ego translation; pixels inside a pedestrian's box
    at t carry the box-centre displacement plus the zero-mean shear cue.
    """
    cfg = scenario.config
    dims = tuple(dims or cfg.image_dims)
    sy = dims[0] / cfg.image_dims[0]
    sx = dims[1] / cfg.image_dims[1]
    ys, xs = scenario._grid(dims)
    flow = np.empty((2, *dims), dtype=np.float64)
    flow[0] = cfg.ego_speed[0] * sx
    flow[1] = cfg.ego_speed[1] * sy
    for plan in scenario.plans:
        box0 = plan.clean_boxes[t]
        d = plan.clean_boxes[t + 1] - box0
        rows, cols = scenario._box_mask(box0, ys, xs)
        if not rows.any() or not cols.any():
            continue
        row_idx = np.flatnonzero(rows)
        col_sl = slice(np.flatnonzero(cols)[0], np.flatnonzero(cols)[-1] + 1)
        flow[0, row_idx, col_sl] = d[0] * sx
        flow[1, row_idx, col_sl] = d[1] * sy
        amp = plan.shear(t) * sy
        if amp:
            k = len(row_idx) // 2
            flow[1, row_idx[:k], col_sl] += amp
            flow[1, row_idx[len(row_idx) - k:], col_sl] -= amp
    return flow.astype(np.float32)


def _behavior(rng: np.random.Generator, plan: PedestrianPlan, t: int) -> dict:
    in_lead = plan.cueing(t)
    crossing_now = plan.crossing and t >= plan.t_turn
    p_look = 0.7 if in_lead else (0.3 if crossing_now else 0.05)
    gesture = "hand_ack" if in_lead and rng.random() < 0.2 else "none"
    return {
        "look": "looking" if rng.random() < p_look else "not-looking",
        "nod": "nodding" if rng.random() < 0.02 else "not-nodding",
        "gesture": gesture,
        "action": "walking",
    }


_ATTR_CHOICES = {
    "age": ("child", "young", "adult", "senior"),
    "gender": ("female", "male"),
    "group_size": ("1", "2", "3", "4+"),
}
_SCENE_CHOICES = {
    "motion_dir": ("LAT", "LONG"),
    "lanes": ("1", "2", "3", "4+"),
    "sign": ("none", "ped_sign", "stop_sign"),
    "crossing": ("none", "zebra", "unmarked"),
    "road_type": ("street", "parking_lot", "garage", "intersection"),
    "signal": ("none", "red", "green", "yellow"),
}


def _pick(rng: np.random.Generator, choices: dict) -> dict:
    return {k: v[int(rng.integers(len(v)))] for k, v in choices.items()}


def _plan_pedestrian(rng: np.random.Generator, cfg: ScenarioConfig, index: int, lane_y: float,
                     crossing: bool) -> PedestrianPlan:
    H, W = cfg.image_dims
    L = cfg.frames_per_track
    scale = H / 240.0
    w = rng.uniform(14, 22) * scale
    h = w * rng.uniform(2.2, 2.8)
    walk = rng.uniform(0.8, 2.0) * scale * (1 if rng.random() < 0.5 else -1)
    ex, ey = cfg.ego_speed

    t_precursor = t_cue = t_switch = t_turn = None
    if crossing:
        hi = min(int(0.65 * L), L - cfg.lead - 2)
        lo = max(1, int(0.15 * L))
        if hi < lo:
            raise GenerationError(f"frames_per_track={L} too short for lead={cfg.lead}")
        t_switch = int(rng.integers(lo, hi + 1))
        t_turn = t_switch + cfg.lead
        t_cue = t_switch - cfg.cue_lead
        t_precursor = t_cue - int(rng.integers(4, 13))

    y = lane_y - h / 2
    cross_speed = rng.uniform(1.0, 2.0) * scale
    if crossing:
        room = H - 2 - (y + h / 2)
        cross_speed = min(cross_speed, room / max(L - 1 - t_turn, 1))
    vel = np.zeros((L - 1, 2))
    for t in range(L - 1):
        if crossing and t >= t_turn:
            vel[t] = (0.3 * walk, cross_speed)
        else:
            vel[t] = (walk, 0.0)
    vel += (ex, ey)
    path = np.zeros((L, 2))
    path[1:] = np.cumsum(vel, axis=0)
    span = path[:, 0].max() - path[:, 0].min()
    margin = w / 2 + 2
    if span > W - 2 * margin:
        raise GenerationError("pedestrian path does not fit the image; shorten frames_per_track")
    x0 = rng.uniform(margin - path[:, 0].min(), W - margin - path[:, 0].max())
    boxes = np.zeros((L, 4))
    boxes[:, 0] = x0 + path[:, 0]
    boxes[:, 1] = y + path[:, 1]
    boxes[:, 2] = w
    boxes[:, 3] = h
    color = np.clip(NORMAL_COLOR + rng.uniform(-0.05, 0.05, 3), 0, 1)
    return PedestrianPlan(f"p{index}", crossing, t_precursor, t_cue, t_switch, t_turn, boxes, color)


def generate_scenario(config: ScenarioConfig, video_id: Optional[str] = None) -> Scenario:
    """Build one scenario; identical configs give identical scenarios."""
    rng = np.random.default_rng(config.seed)
    H, W = config.image_dims
    L = config.frames_per_track
    video_id = video_id or f"syn{config.seed:05d}"
    curb = 0.625 * H
    top = 0.3 * H
    lane_gap = 12 * H / 240.0
    max_lanes = int((curb - top) // lane_gap)
    if config.num_pedestrians > max_lanes:
        raise GenerationError(
            f"{config.num_pedestrians} pedestrians do not fit {max_lanes} sidewalk lanes")
    lanes = curb - 4 - lane_gap * rng.permutation(max_lanes)[:config.num_pedestrians]
    n_cross = rng.random(config.num_pedestrians) < config.crossing_fraction
    plans = [
        _plan_pedestrian(rng, config, i, lanes[i], bool(n_cross[i]))
        for i in range(config.num_pedestrians)
    ]
    texture_phase = rng.uniform(0, 2 * np.pi, 3)
    scene_record = _pick(rng, _SCENE_CHOICES) if config.with_scene else None
    frame_uri = f"frames/{video_id}/%06d.png"
    tracks = []
    for plan in plans:
        noisy = plan.clean_boxes + rng.normal(0.0, config.noise_std, plan.clean_boxes.shape)
        noisy[:, 2:] = np.maximum(noisy[:, 2:], 1.0)
        behavior = tuple(_behavior(rng, plan, t) for t in range(L))
        tracks.append(PedestrianTrack(
            video_id=video_id,
            pedestrian_id=plan.pedestrian_id,
            frame_indices=tuple(range(L)),
            boxes=tuple(BoundingBox(*map(float, b)) for b in noisy),
            intention_labels=tuple(plan.label(t) for t in range(L)),
            behavior_raw=behavior,
            scene_raw=None if scene_record is None else tuple(dict(scene_record) for _ in range(L)),
            attrs_raw=_pick(rng, _ATTR_CHOICES),
            image_dims=(H, W),
            frame_uri_template=frame_uri,
        ))
    return Scenario(config, video_id, plans, tracks, texture_phase)


def scenario_suite(count: int, seed: int, **overrides) -> list[Scenario]:
    """``count`` single-pedestrian scenarios with per-scenario ego speed."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        ego = (float(np.round(rng.uniform(-1.5, 0.0), 3)), 0.0)
        cfg = ScenarioConfig(seed=int(rng.integers(2**31)), ego_speed=ego, **overrides)
        out.append(generate_scenario(cfg, video_id=f"s{seed}_{k:04d}"))
    return out


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_scenarios(scenarios: Sequence[Scenario], out_dir: str, tracks_name: str = "tracks.jsonl") -> str:
    """Write frames (PNG), flows (PTFL), tracks (JSONL) and phases (JSON) under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    all_tracks = []
    phases = {}
    for sc in scenarios:
        frame_dir = os.path.join(out_dir, "frames", sc.video_id)
        os.makedirs(frame_dir, exist_ok=True)
        for t in range(sc.length):
            with open(os.path.join(frame_dir, f"{t:06d}.png"), "wb") as fh:
                fh.write(_png_bytes(sc.frame_uint8(t)))
            if t < sc.length - 1:
                write_flow(os.path.join(frame_dir, f"{t:06d}.ptfl"), analytic_flow(sc, t))
        all_tracks.extend(sc.tracks)
        phases[sc.video_id] = {
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(sc.config).items()},
            "pedestrians": [p.phases() for p in sc.plans],
        }
    path = os.path.join(out_dir, tracks_name)
    write_tracks(path, all_tracks)
    with open(os.path.join(out_dir, "phases.json"), "w") as fh:
        json.dump(phases, fh, indent=1, sort_keys=True)
    return path


def scenario_samples(
    scenarios: Sequence[Scenario],
    m: int,
    n: int,
    stride: int = 1,
    dims: Optional[Sequence[int]] = None,
    toggles: FeatureToggles = FeatureToggles(),
    vocab: AttributeVocabulary = DEFAULT_VOCAB,
) -> list[PedestrianSample]:
    """Window scenarios in memory, rendering frames straight at ``dims``."""
    frames = {}
    tracks = []
    for sc in scenarios:
        shared = sc.track_frames(dims, toggles.use_images, toggles.use_flow)
        for track in sc.tracks:
            frames[(track.video_id, track.pedestrian_id)] = shared
            tracks.append(track)
    return build_samples(tracks, m, n, stride, image_dims_target=dims or scenarios[0].config.image_dims,
                         toggles=toggles, vocab=vocab, frames_by_track=frames).samples


def suite_samples(
    count: int,
    seed: int,
    m: int,
    n: int,
    dims: Optional[Sequence[int]] = None,
    toggles: FeatureToggles = FeatureToggles(),
    vocab: AttributeVocabulary = DEFAULT_VOCAB,
    anchor_stride: int = 16,
    **overrides,
) -> list[PedestrianSample]:
    """One window from each of ``count`` fresh single-pedestrian scenarios.

    Scenario k contributes its ``k mod A``-th window, where A is the number of
    windows at ``anchor_stride``, so early, middle and late phases of a track
    are all represented. Frames are copied out of each scenario so memory
    grows with the number of windows, not the track length.
    """
    out = []
    for k, sc in enumerate(scenario_suite(count, seed, **overrides)):
        windows = scenario_samples([sc], m, n, anchor_stride, dims, toggles, vocab)
        if not windows:
            raise GenerationError(f"scenario {sc.video_id} has no valid {m}+{n} window")
        s = windows[k % len(windows)]
        ctx = GlobalContext(s.global_ctx.images.copy(), s.global_ctx.flows.copy())
        out.append(replace(s, global_ctx=ctx))
    return out
