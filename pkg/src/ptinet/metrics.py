"""Evaluation metrics in source-image pixels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _pair(pred, gt, center_only: bool):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"expected matching (N, n, 4) arrays, got {pred.shape} and {gt.shape}")
    if center_only:
        pred, gt = pred[..., :2], gt[..., :2]
    return pred, gt


def displacement(pred, gt, center_only: bool = False) -> np.ndarray:
    """Per-step Euclidean distance ``(N, n)`` between box vectors."""
    pred, gt = _pair(pred, gt, center_only)
    return np.sqrt(((pred - gt) ** 2).sum(-1))


def ade(pred, gt, center_only: bool = False) -> float:
    return float(displacement(pred, gt, center_only).mean())


def fde(pred, gt, center_only: bool = False) -> float:
    return float(displacement(pred, gt, center_only)[:, -1].mean())


def classification_report(probs, labels, threshold: float = 0.5, final_step_only: bool = False):
    """Pooled binary F1 (positive = cross) and accuracy.

    F1 is 0 when precision or recall has a zero denominator.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {labels.shape}")
    if final_step_only:
        probs, labels = probs[..., -1], labels[..., -1]
    pred = probs >= threshold
    truth = labels.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    total = pred.size
    accuracy = (total - fp - fn) / total if total else 0.0
    if tp + fp == 0 or tp + fn == 0:
        return 0.0, float(accuracy)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(f1), float(accuracy)


@dataclass
class MetricReport:
    ade_pixels: dict[str, float] = field(default_factory=dict)
    fde_pixels: dict[str, float] = field(default_factory=dict)
    f1: float = 0.0
    accuracy: float = 0.0
    sample_count: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def horizon_key(seconds: float) -> str:
    return f"{seconds:.1f}s"
