"""PTINet: shared encoder, trajectory decoder and intention decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import DecoderConfig, EncoderConfig
from .decoders import IntentionDecoder, TrajectoryDecoder
from .domain import PedestrianSample, PredictionOutput
from .encoders import EVAL, VAE_PATHS, FusedFeature, LatentGaussian, PTINetEncoder


@dataclass
class Batch:
    pv: torch.Tensor  # (B, m, 8) pixels
    attrs: torch.Tensor  # (B, P)
    behavior: torch.Tensor  # (B, m, Bw)
    scene: Optional[torch.Tensor]  # (B, m, S)
    images: Optional[torch.Tensor]  # (B, m, 3, H, W)
    flows: Optional[torch.Tensor]  # (B, m - 1, 2, H, W)
    last_box: torch.Tensor  # (B, 4)
    future_boxes: Optional[torch.Tensor] = None  # (B, n, 4)
    future_intent: Optional[torch.Tensor] = None  # (B, n)

    def __len__(self) -> int:
        return self.pv.shape[0]


def collate(samples: Sequence[PedestrianSample], use_images: bool = True, use_flow: bool = True,
            dtype: torch.dtype = torch.float32) -> Batch:
    def t(arrays):
        return torch.as_tensor(np.stack(arrays), dtype=dtype)

    scene = None
    if all(s.local.scene_attrs is not None for s in samples):
        scene = t([s.local.scene_attrs for s in samples])
    return Batch(
        pv=t([s.past.features() for s in samples]),
        attrs=t([s.local.pedestrian_attrs for s in samples]),
        behavior=t([s.local.behavior_attrs for s in samples]),
        scene=scene,
        images=t([s.global_ctx.images for s in samples]) if use_images else None,
        flows=t([s.global_ctx.flows for s in samples]) if use_flow else None,
        last_box=t([s.last_box for s in samples]),
        future_boxes=t([s.future_boxes for s in samples]),
        future_intent=t([s.future_intentions for s in samples]),
    )


@dataclass
class ModelOutput:
    boxes: torch.Tensor  # (B, n, 4)
    intention_probs: torch.Tensor  # (B, n)
    latents: dict[str, LatentGaussian]
    fused: FusedFeature
    reconstructions: list[tuple[LatentGaussian, torch.Tensor]]


class PTINet(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig = EncoderConfig(), decoder_cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.encoder = PTINetEncoder(encoder_cfg)
        hidden = encoder_cfg.fused_dim
        self.trajectory = TrajectoryDecoder(hidden, decoder_cfg.offset_output)
        self.intention = IntentionDecoder(hidden)

    def forward(self, batch: Batch, n: int, mode: str = EVAL, generator: Optional[torch.Generator] = None,
                noise: Optional[dict[str, torch.Tensor]] = None, reconstruct: bool = False) -> ModelOutput:
        fused, latents = self.encoder(
            batch.pv, batch.attrs, batch.behavior, batch.scene, batch.images, batch.flows,
            mode=mode, noise=noise, generator=generator,
        )
        boxes = self.trajectory(fused.vector, batch.last_box, n)
        box_inputs = None
        if self.decoder_cfg.couple_intention:
            box_inputs = torch.cat([batch.last_box.unsqueeze(1), boxes[:, :-1]], dim=1)
        probs = self.intention(fused.vector, batch.last_box, n, box_inputs)
        recon = []
        if reconstruct:
            recon = self._reconstructions(batch, fused, latents)
        return ModelOutput(boxes, probs, latents, fused, recon)

    def _reconstructions(self, batch: Batch, fused: FusedFeature, latents) -> list:
        enc = self.encoder
        targets = {
            "pv": (batch.pv - enc.pv_mean) / enc.pv_std,
            "lcf_b": batch.behavior,
            "lcf_s": batch.scene,
        }
        out = []
        for name in VAE_PATHS:
            if name not in latents:
                continue
            z = fused.segment(name)
            target = targets[name]
            out.append((getattr(enc, name).reconstruct(z, target.shape[1]), target))
        return out

    @torch.no_grad()
    def fit_standardization(self, samples: Sequence[PedestrianSample]) -> None:
        """Set the fixed input/output scalings from training data statistics."""
        pv = np.concatenate([s.past.features() for s in samples])
        boxes = np.concatenate([s.past.positions for s in samples])
        steps = np.concatenate([
            np.diff(np.concatenate([s.last_box[None], s.future_boxes]), axis=0) for s in samples
        ])
        floor = 1e-3

        def t(a):
            return torch.as_tensor(a, dtype=self.encoder.pv_mean.dtype)

        self.encoder.pv_mean.copy_(t(pv.mean(0)))
        self.encoder.pv_std.copy_(t(np.maximum(pv.std(0), floor)))
        for dec in (self.trajectory, self.intention):
            dec.box_mean.copy_(t(boxes.mean(0)))
            dec.box_scale.copy_(t(np.maximum(boxes.std(0), floor)))
        self.trajectory.output_scale.copy_(t(np.maximum(np.sqrt((steps ** 2).mean(0)), floor)))

    @torch.no_grad()
    def predict_arrays(self, samples: Sequence[PedestrianSample], n: int, batch_size: int = 64):
        """Eval-mode predictions: boxes ``(N, n, 4)`` and probabilities ``(N, n)``."""
        was_training = self.training
        self.eval()
        dtype = self.encoder.pv_mean.dtype
        boxes, probs = [], []
        toggles = self.encoder_cfg.toggles
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size], toggles.use_images, toggles.use_flow, dtype)
            out = self(batch, n, mode=EVAL)
            boxes.append(out.boxes.double().numpy())
            probs.append(out.intention_probs.double().numpy())
        self.train(was_training)
        return np.concatenate(boxes), np.concatenate(probs)

    def predict(self, samples: Sequence[PedestrianSample], n: int) -> list[PredictionOutput]:
        boxes, probs = self.predict_arrays(samples, n)
        return [PredictionOutput(b, p) for b, p in zip(boxes, probs)]


class ConstantVelocityPredictor:
    """Extrapolates the mean per-frame displacement over the observed window."""

    def predict_arrays(self, samples: Sequence[PedestrianSample], n: int):
        boxes = []
        for s in samples:
            pos = s.past.positions
            vel = (pos[-1] - pos[0]) / (len(pos) - 1)
            steps = np.arange(1, n + 1)[:, None]
            boxes.append(pos[-1] + steps * vel)
        probs = np.zeros((len(samples), n))
        return np.stack(boxes), probs


class OraclePredictor:
    """Returns the ground truth; used to exercise the evaluator."""

    def predict_arrays(self, samples: Sequence[PedestrianSample], n: int):
        boxes = np.stack([s.future_boxes[:n] for s in samples]).astype(np.float64)
        probs = np.stack([s.future_intentions[:n] for s in samples]).astype(np.float64)
        return boxes, probs
