"""Qualitative prediction plots rendered with Pillow."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .domain import PedestrianSample, PredictionOutput

PRED_COLOR = (255, 0, 0)
GT_COLOR = (255, 255, 255)
GT_PATH_COLOR = (0, 80, 255)
BAR_COLOR = (255, 210, 0)
INSET_BG = (20, 20, 20)

INSET_MARGIN = 4
INSET_HEIGHT = 40
BAR_WIDTH = 3
BAR_GAP = 1


def inset_geometry(n: int, image_dims) -> tuple[int, int, int, int]:
    """(left, top, right, bottom) of the bar area inside the inset panel."""
    left = INSET_MARGIN + 2
    top = INSET_MARGIN + 2
    right = left + n * (BAR_WIDTH + BAR_GAP) - BAR_GAP
    bottom = top + INSET_HEIGHT
    return left, top, right, bottom


def box_corners(box) -> tuple[int, int, int, int]:
    x, y, w, h = (float(v) for v in box)
    return (int(round(x - w / 2)), int(round(y - h / 2)), int(round(x + w / 2)), int(round(y + h / 2)))


def _backdrop(sample: PedestrianSample) -> Image.Image:
    H, W = sample.image_dims
    frame = np.asarray(sample.global_ctx.images[-1], dtype=np.float32)
    rgb = np.clip(np.round(frame.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    img = Image.fromarray(rgb, "RGB")
    if img.size != (W, H):
        img = img.resize((W, H), Image.BILINEAR)
    return img


def _dotted(draw: ImageDraw.ImageDraw, points: np.ndarray, color) -> None:
    for x, y in points:
        draw.ellipse((x - 1, y - 1, x + 1, y + 1), fill=color)


def render_qualitative(sample: PedestrianSample, prediction: PredictionOutput) -> Image.Image:
    img = _backdrop(sample)
    draw = ImageDraw.Draw(img)
    gt = np.asarray(sample.future_boxes, dtype=np.float64)
    pred = np.asarray(prediction.boxes, dtype=np.float64)
    _dotted(draw, gt[:, :2], GT_PATH_COLOR)
    _dotted(draw, pred[:, :2], PRED_COLOR)
    draw.rectangle(box_corners(gt[-1]), outline=GT_COLOR)
    draw.rectangle(box_corners(pred[-1]), outline=PRED_COLOR)

    probs = np.clip(np.asarray(prediction.intention_probs, dtype=np.float64), 0.0, 1.0)
    left, top, right, bottom = inset_geometry(len(probs), sample.image_dims)
    draw.rectangle((left - 2, top - 2, right + 2, bottom + 2), fill=INSET_BG)
    for i, p in enumerate(probs):
        x0 = left + i * (BAR_WIDTH + BAR_GAP)
        height = int(round(p * INSET_HEIGHT))
        if height:
            draw.rectangle((x0, bottom - height, x0 + BAR_WIDTH - 1, bottom - 1), fill=BAR_COLOR)
    return img


def emit_qualitative_plot(sample: PedestrianSample, prediction: PredictionOutput, out_path: str) -> str:
    """Write a PNG: frame backdrop, red predicted and white ground-truth final boxes,
    red/blue dotted paths and a crossing-probability bar inset (top left)."""
    render_qualitative(sample, prediction).save(out_path, format="PNG")
    return out_path
