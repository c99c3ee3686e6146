"""Iterative LSTM decoders for future boxes and per-step crossing probability.

Both decoders start from hidden state F (cell state zero) and consume one
box per step. The trajectory head emits a per-step offset that is added to
the previous box; the intention head emits two logits whose softmax "cross"
component is the returned probability.
"""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .encoders import ShapeError


class _BoxScaling(nn.Module):
    """Fixed affine standardization of the 4-vector box input (identity by default)."""

    def __init__(self):
        super().__init__()
        self.register_buffer("box_mean", torch.zeros(4))
        self.register_buffer("box_scale", torch.ones(4))

    def standardize(self, box: torch.Tensor) -> torch.Tensor:
        return (box - self.box_mean) / self.box_scale


def _check(F_vec: torch.Tensor, last_box: torch.Tensor, hidden: int, n: int) -> None:
    if F_vec.shape[-1] != hidden:
        raise ShapeError(f"|F| = {F_vec.shape[-1]} but decoder hidden width is {hidden}")
    if last_box.shape[-1] != 4 or last_box.shape[0] != F_vec.shape[0]:
        raise ShapeError(f"last_box must be (B, 4), got {tuple(last_box.shape)}")
    if n < 1:
        raise ValueError("n must be at least 1")


class TrajectoryDecoder(_BoxScaling):
    def __init__(self, hidden: int, offset_output: bool = True):
        super().__init__()
        self.hidden = hidden
        self.offset_output = offset_output
        self.cell = nn.LSTMCell(4, hidden)
        self.head = nn.Linear(hidden, 4)
        self.register_buffer("output_scale", torch.ones(4))

    def forward(self, F_vec: torch.Tensor, last_box: torch.Tensor, n: int) -> torch.Tensor:
        """Roll out ``n`` boxes ``(B, n, 4)`` starting from the last observed box."""
        _check(F_vec, last_box, self.hidden, n)
        h, c = F_vec, torch.zeros_like(F_vec)
        prev = last_box
        boxes = []
        for _ in range(n):
            h, c = self.cell(self.standardize(prev), (h, c))
            out = self.head(h) * self.output_scale
            box = prev + out if self.offset_output else out * self.box_scale + self.box_mean
            boxes.append(box)
            prev = box
        return torch.stack(boxes, dim=1)


class IntentionDecoder(_BoxScaling):
    def __init__(self, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.cell = nn.LSTMCell(4, hidden)
        self.head = nn.Linear(hidden, 2)

    def logits(self, F_vec: torch.Tensor, last_box: torch.Tensor, n: int,
               box_inputs: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``(B, n, 2)`` logits. The input at every step is ``last_box`` unless
        ``box_inputs`` (B, n, 4) supplies a box per step."""
        _check(F_vec, last_box, self.hidden, n)
        h, c = F_vec, torch.zeros_like(F_vec)
        held = self.standardize(last_box)
        out = []
        for step in range(n):
            x = held if box_inputs is None else self.standardize(box_inputs[:, step])
            h, c = self.cell(x, (h, c))
            out.append(self.head(h))
        return torch.stack(out, dim=1)

    def forward(self, F_vec: torch.Tensor, last_box: torch.Tensor, n: int,
                box_inputs: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Crossing probability per step, ``(B, n)``."""
        return torch.softmax(self.logits(F_vec, last_box, n, box_inputs), dim=-1)[..., 1]
