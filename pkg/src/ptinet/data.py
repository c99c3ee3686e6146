"""Track interchange format, attribute encoding, windowing and frame loading.

Track files are UTF-8 JSON Lines, one pedestrian track per line::

    {"video_id": "v0", "pedestrian_id": "p0", "frames": [0, 1, ...],
     "boxes": [[x, y, w, h], ...], "intent": [0, 1, ...],
     "behavior": [{"look": "looking", "nod": null, ...}, ...],
     "scene": [{"motion_dir": "LAT", ...}, ...],        # optional
     "attrs": {"age": "adult", "gender": "male", "group_size": "1"},
     "image_dims": [H, W], "frame_uri": "frames/v0/%06d.png"}

Boxes are center-based in source pixels. Optical flow for the frame pair
``(f, f+1)`` lives in a PTFL file named by ``flow_uri % f``; when a line has
no ``flow_uri`` the frame pattern with its extension swapped to ``.ptfl`` is
used.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import FeatureToggles
from .domain import (
    BoundingBox,
    GlobalContext,
    LocalContext,
    PastTrajectory,
    PedestrianSample,
    compute_velocities,
)

FLOW_MAGIC = b"PTFL"
DEFAULT_TARGET_DIMS = (240, 420)

ATTR_FIELDS = ("age", "gender", "group_size")
BEHAVIOR_FIELDS = ("look", "nod", "gesture", "action")
SCENE_FIELDS = ("motion_dir", "lanes", "sign", "crossing", "road_type", "signal")


class TrackFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TrackSchemaError(TrackFormatError):
    pass


class EncodingError(ValueError):
    def __init__(self, group: str, name: str, value):
        self.field = f"{group}.{name}"
        self.value = value
        super().__init__(f"value {value!r} not in vocabulary for field {self.field}")


@dataclass(frozen=True)
class PedestrianTrack:
    video_id: str
    pedestrian_id: str
    frame_indices: tuple[int, ...]
    boxes: tuple[BoundingBox, ...]
    intention_labels: tuple[int, ...]
    behavior_raw: tuple[dict, ...]
    scene_raw: Optional[tuple[dict, ...]]
    attrs_raw: dict
    image_dims: tuple[int, int]
    frame_uri_template: str
    flow_uri_template: Optional[str] = None

    def __len__(self) -> int:
        return len(self.frame_indices)

    @property
    def box_array(self) -> np.ndarray:
        return np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def flow_template(self) -> str:
        if self.flow_uri_template:
            return self.flow_uri_template
        return os.path.splitext(self.frame_uri_template)[0] + ".ptfl"

    def check(self, line: Optional[int] = None) -> None:
        size = len(self.frame_indices)
        per_frame = {
            "boxes": len(self.boxes),
            "intent": len(self.intention_labels),
            "behavior": len(self.behavior_raw),
        }
        if self.scene_raw is not None:
            per_frame["scene"] = len(self.scene_raw)
        for key, count in per_frame.items():
            if count != size:
                raise TrackSchemaError(f"{key} has {count} entries, frames has {size}", line)
        if any(b >= a for a, b in zip(self.frame_indices[1:], self.frame_indices[:-1])):
            raise TrackSchemaError("frame indices must be strictly increasing", line)
        if any(label not in (0, 1) for label in self.intention_labels):
            raise TrackSchemaError("intent labels must be 0 or 1", line)
        if len(self.image_dims) != 2 or min(self.image_dims) <= 0:
            raise TrackSchemaError("image_dims must be two positive ints", line)


_REQUIRED = ("video_id", "pedestrian_id", "frames", "boxes", "intent", "behavior",
             "attrs", "image_dims", "frame_uri")


def _track_from_obj(obj: Mapping, line: Optional[int]) -> PedestrianTrack:
    if not isinstance(obj, Mapping):
        raise TrackFormatError("expected a JSON object", line)
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise TrackSchemaError(f"missing keys {missing}", line)
    try:
        boxes = tuple(BoundingBox(*(float(v) for v in b)) for b in obj["boxes"])
        scene = obj.get("scene")
        track = PedestrianTrack(
            video_id=str(obj["video_id"]),
            pedestrian_id=str(obj["pedestrian_id"]),
            frame_indices=tuple(int(f) for f in obj["frames"]),
            boxes=boxes,
            intention_labels=tuple(int(v) for v in obj["intent"]),
            behavior_raw=tuple(dict(r) for r in obj["behavior"]),
            scene_raw=None if scene is None else tuple(dict(r) for r in scene),
            attrs_raw=dict(obj["attrs"]),
            image_dims=tuple(int(v) for v in obj["image_dims"]),
            frame_uri_template=str(obj["frame_uri"]),
            flow_uri_template=obj.get("flow_uri"),
        )
    except TrackFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise TrackSchemaError(f"bad field value: {exc}", line) from exc
    track.check(line)
    return track


def parse_track_file(data: bytes | str) -> list[PedestrianTrack]:
    """Parse JSON-Lines track data. Blank lines are skipped."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    tracks = []
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrackFormatError(f"malformed JSON ({exc.msg})", lineno) from exc
        tracks.append(_track_from_obj(obj, lineno))
    return tracks


def track_to_obj(track: PedestrianTrack) -> dict:
    obj = {
        "video_id": track.video_id,
        "pedestrian_id": track.pedestrian_id,
        "frames": list(track.frame_indices),
        "boxes": [list(b) for b in track.boxes],
        "intent": list(track.intention_labels),
        "behavior": [dict(r) for r in track.behavior_raw],
        "attrs": dict(track.attrs_raw),
        "image_dims": list(track.image_dims),
        "frame_uri": track.frame_uri_template,
    }
    if track.scene_raw is not None:
        obj["scene"] = [dict(r) for r in track.scene_raw]
    if track.flow_uri_template:
        obj["flow_uri"] = track.flow_uri_template
    return obj


def emit_track_file(tracks: Iterable[PedestrianTrack]) -> bytes:
    lines = [json.dumps(track_to_obj(t), separators=(",", ":")) for t in tracks]
    return ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")


def read_tracks(path: str) -> list[PedestrianTrack]:
    with open(path, "rb") as fh:
        return parse_track_file(fh.read())


def write_tracks(path: str, tracks: Iterable[PedestrianTrack]) -> None:
    with open(path, "wb") as fh:
        fh.write(emit_track_file(tracks))


# ---------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class AttributeVocabulary:
    """Ordered categorical values for each attribute field, grouped by kind."""

    attrs: dict[str, tuple[str, ...]]
    behavior: dict[str, tuple[str, ...]]
    scene: dict[str, tuple[str, ...]]

    @property
    def attrs_width(self) -> int:
        return sum(len(v) for v in self.attrs.values())

    @property
    def behavior_width(self) -> int:
        return sum(len(v) for v in self.behavior.values())

    @property
    def scene_width(self) -> int:
        return sum(len(v) for v in self.scene.values())

    def to_json(self) -> str:
        flat = {}
        for group in ("attrs", "behavior", "scene"):
            for name, values in getattr(self, group).items():
                flat[f"{group}.{name}"] = list(values)
        return json.dumps(flat, indent=1)

    @classmethod
    def from_json(cls, text: str | bytes) -> "AttributeVocabulary":
        flat = json.loads(text)
        groups: dict[str, dict[str, tuple[str, ...]]] = {"attrs": {}, "behavior": {}, "scene": {}}
        for key, values in flat.items():
            group, _, name = key.partition(".")
            if group not in groups or not name:
                raise ValueError(f"vocabulary key {key!r} must be attrs.*, behavior.* or scene.*")
            groups[group][name] = tuple(str(v) for v in values)
        return cls(**groups)


DEFAULT_VOCAB = AttributeVocabulary(
    attrs={
        "age": ("child", "young", "adult", "senior"),
        "gender": ("female", "male"),
        "group_size": ("1", "2", "3", "4+"),
    },
    behavior={
        "look": ("not-looking", "looking"),
        "nod": ("not-nodding", "nodding"),
        "gesture": ("none", "hand_ack", "hand_yield", "hand_rightofway", "nod", "other"),
        "action": ("standing", "walking"),
    },
    scene={
        "motion_dir": ("LAT", "LONG"),
        "lanes": ("1", "2", "3", "4+"),
        "sign": ("none", "ped_sign", "stop_sign"),
        "crossing": ("none", "zebra", "unmarked"),
        "road_type": ("street", "parking_lot", "garage", "intersection"),
        "signal": ("none", "red", "green", "yellow"),
    },
)


def _one_hot_record(record: Mapping, fields: Mapping[str, tuple[str, ...]], group: str) -> np.ndarray:
    parts = []
    for name, values in fields.items():
        seg = np.zeros(len(values), dtype=np.float32)
        raw = record.get(name)
        if raw is not None:
            key = str(raw)
            if key not in values:
                raise EncodingError(group, name, raw)
            seg[values.index(key)] = 1.0
        parts.append(seg)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


@dataclass(frozen=True)
class EncodedAttributes:
    pedestrian_attrs: np.ndarray  # (P,)
    behavior_attrs: np.ndarray  # (L, B)
    scene_attrs: Optional[np.ndarray]  # (L, S) or None

    def window(self, start: int, stop: int) -> LocalContext:
        scene = None if self.scene_attrs is None else self.scene_attrs[start:stop]
        return LocalContext(self.pedestrian_attrs, self.behavior_attrs[start:stop], scene)


def encode_attributes(track: PedestrianTrack, vocab: AttributeVocabulary = DEFAULT_VOCAB) -> EncodedAttributes:
    """One-hot encode a track's categorical attributes frame by frame."""
    ped = _one_hot_record(track.attrs_raw, vocab.attrs, "attrs")
    beh = np.stack([_one_hot_record(r, vocab.behavior, "behavior") for r in track.behavior_raw])
    scene = None
    if track.scene_raw is not None:
        scene = np.stack([_one_hot_record(r, vocab.scene, "scene") for r in track.scene_raw])
    return EncodedAttributes(ped, beh, scene)


# ----------------------------------------------------------------- windowing

@dataclass
class TrackFrames:
    """Resized images ``(L, 3, H, W)`` and flows ``(L - 1, 2, H, W)`` for a whole track."""

    images: np.ndarray
    flows: np.ndarray

    def window(self, start: int, stop: int) -> GlobalContext:
        return GlobalContext(self.images[start:stop], self.flows[start:stop - 1])


def window_anchors(track_length: int, m: int, n: int, stride: int) -> list[int]:
    if m < 2 or n < 1 or stride < 1:
        raise ValueError("need m >= 2, n >= 1, stride >= 1")
    return list(range(m - 1, track_length - n, stride))


def _placeholder_global(m: int) -> GlobalContext:
    images = np.broadcast_to(np.zeros((), dtype=np.float32), (m, 3, 1, 1))
    flows = np.broadcast_to(np.zeros((), dtype=np.float32), (m - 1, 2, 1, 1))
    return GlobalContext(images, flows)


def window_track(
    track: PedestrianTrack,
    m: int,
    n: int,
    stride: int = 1,
    vocab: AttributeVocabulary = DEFAULT_VOCAB,
    frames: Optional[TrackFrames] = None,
    encoded: Optional[EncodedAttributes] = None,
) -> list[PedestrianSample]:
    """Cut a track into (m past, n future) samples with anchors every ``stride`` frames.

    Windows spanning a gap in the frame indices are dropped. Without ``frames``
    the samples carry a 1x1 all-zero global context.
    """
    idx = np.asarray(track.frame_indices)
    boxes = track.box_array
    labels = np.asarray(track.intention_labels, dtype=np.int64)
    if encoded is None:
        encoded = encode_attributes(track, vocab)
    samples = []
    for t in window_anchors(len(track), m, n, stride):
        start, stop = t - m + 1, t + n + 1
        if idx[stop - 1] - idx[start] != stop - 1 - start:
            continue
        positions = boxes[start:t + 1]
        past = PastTrajectory(positions, compute_velocities(positions))
        global_ctx = frames.window(start, t + 1) if frames is not None else _placeholder_global(m)
        samples.append(
            PedestrianSample(
                past=past,
                local=encoded.window(start, t + 1),
                global_ctx=global_ctx,
                future_boxes=boxes[t + 1:stop],
                future_intentions=labels[t + 1:stop],
                pedestrian_id=track.pedestrian_id,
                video_id=track.video_id,
                anchor_frame=int(idx[t]),
                image_dims=tuple(track.image_dims),
                anchor_index=t,
                track_length=len(track),
            )
        )
    return samples


# ------------------------------------------------------------- normalization

def _box_scale(image_dims: Sequence[int]) -> np.ndarray:
    h, w = image_dims
    if h <= 0 or w <= 0:
        raise ValueError(f"image dims must be positive, got {tuple(image_dims)}")
    return np.array([w, h, w, h], dtype=np.float64)


def normalize_boxes(boxes, image_dims) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64) / _box_scale(image_dims)


def denormalize_boxes(boxes, image_dims) -> np.ndarray:
    return np.asarray(boxes, dtype=np.float64) * _box_scale(image_dims)


def _rescale_sample(sample: PedestrianSample, fn, image_dims) -> PedestrianSample:
    past = PastTrajectory(fn(sample.past.positions, image_dims), fn(sample.past.velocities, image_dims))
    return replace(sample, past=past, future_boxes=fn(sample.future_boxes, image_dims))


def normalize_sample(sample: PedestrianSample, image_dims, mode: str = "none") -> PedestrianSample:
    """``scale-to-unit`` divides x, w (and dx, dw) by W and y, h by H; ``none`` is identity."""
    _box_scale(image_dims)
    if mode == "none":
        return sample
    if mode != "scale-to-unit":
        raise ValueError(f"unknown normalization mode {mode!r}")
    return _rescale_sample(sample, normalize_boxes, image_dims)


def denormalize_sample(sample: PedestrianSample, image_dims, mode: str = "none") -> PedestrianSample:
    _box_scale(image_dims)
    if mode == "none":
        return sample
    if mode != "scale-to-unit":
        raise ValueError(f"unknown normalization mode {mode!r}")
    return _rescale_sample(sample, denormalize_boxes, image_dims)


# ------------------------------------------------------------------ flow I/O

def write_flow(path: str, flow: np.ndarray) -> None:
    """Write a ``(2, H, W)`` flow field (u plane then v plane) as PTFL."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flow(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a PTFL flow file")
    h, w = struct.unpack("<II", data[4:12])
    expected = 12 + h * w * 2 * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(2, h, w).astype(np.float32)


# -------------------------------------------------------------- frame loading

def _resolve(root: str, template: str, frame: int) -> str:
    path = template % frame
    return path if os.path.isabs(path) else os.path.join(root, path)


def resize_images(images: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Bilinear resize of a ``(T, C, H, W)`` stack."""
    if tuple(images.shape[-2:]) == tuple(target):
        return np.asarray(images, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    out = F.interpolate(t, size=tuple(target), mode="bilinear", align_corners=False)
    return out.numpy()


def resize_flows(flows: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Resize ``(T, 2, H, W)`` flows and rescale u by the width ratio, v by the height ratio."""
    src_h, src_w = flows.shape[-2:]
    out = resize_images(flows, target).copy()
    out[:, 0] *= target[1] / src_w
    out[:, 1] *= target[0] / src_h
    return out


def load_frame(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise FileNotFoundError(f"missing frame file: {path}") from None
    return arr.transpose(2, 0, 1)


def load_flow_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing flow file: {path}")
    return read_flow(path)


def load_frame_range(
    track: PedestrianTrack,
    start: int,
    stop: int,
    root: str = ".",
    image_dims_target: Sequence[int] = DEFAULT_TARGET_DIMS,
    toggles: FeatureToggles = FeatureToggles(),
) -> TrackFrames:
    """Load frames ``[start, stop)`` of a track (and the flows between them)."""
    h, w = image_dims_target
    count = stop - start
    frames = track.frame_indices[start:stop]
    if toggles.use_images:
        raw = np.stack([load_frame(_resolve(root, track.frame_uri_template, f)) for f in frames])
        images = resize_images(raw, image_dims_target)
    else:
        images = np.zeros((count, 3, h, w), dtype=np.float32)
    if toggles.use_flow and count > 1:
        raw = np.stack([load_flow_file(_resolve(root, track.flow_template, f)) for f in frames[:-1]])
        flows = resize_flows(raw, image_dims_target)
    else:
        flows = np.zeros((max(count - 1, 0), 2, h, w), dtype=np.float32)
    return TrackFrames(images, flows)


def load_global_context(
    track: PedestrianTrack,
    anchor: int,
    m: int,
    image_dims_target: Sequence[int] = DEFAULT_TARGET_DIMS,
    toggles: FeatureToggles = FeatureToggles(),
    root: str = ".",
) -> GlobalContext:
    """Images and flows for the m-frame window ending at track index ``anchor``."""
    start = anchor - m + 1
    if start < 0 or anchor >= len(track):
        raise IndexError(f"window [{start}, {anchor}] outside track of length {len(track)}")
    frames = load_frame_range(track, start, anchor + 1, root, image_dims_target, toggles)
    return frames.window(0, m)


@dataclass
class SampleSet:
    """Windowed samples plus the attribute widths they were encoded with."""

    samples: list[PedestrianSample] = field(default_factory=list)
    vocab: AttributeVocabulary = DEFAULT_VOCAB

    def __len__(self) -> int:
        return len(self.samples)


def build_samples(
    tracks: Sequence[PedestrianTrack],
    m: int,
    n: int,
    stride: int = 1,
    root: str = ".",
    image_dims_target: Sequence[int] = DEFAULT_TARGET_DIMS,
    toggles: FeatureToggles = FeatureToggles(),
    vocab: AttributeVocabulary = DEFAULT_VOCAB,
    frames_by_track: Optional[Mapping[tuple[str, str], TrackFrames]] = None,
) -> SampleSet:
    """Window every track, loading each track's frames once and sharing them between windows."""
    out = SampleSet(vocab=vocab)
    for track in tracks:
        if not window_anchors(len(track), m, n, stride):
            continue
        key = (track.video_id, track.pedestrian_id)
        if frames_by_track is not None and key in frames_by_track:
            frames = frames_by_track[key]
        else:
            frames = load_frame_range(track, 0, len(track), root, image_dims_target, toggles)
        out.samples.extend(window_track(track, m, n, stride, vocab, frames))
    return out
