"""Optimizer schedule, training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import EncoderConfig, TrainConfig, to_dict, train_config_from_dict
from .data import DEFAULT_VOCAB, AttributeVocabulary, build_samples, read_tracks
from .domain import PedestrianSample
from .encoders import TRAIN
from .losses import intention_loss, total_loss, trajectory_loss
from .metrics import MetricReport, ade, classification_report, fde, horizon_key
from .model import PTINet, collate

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def _denormals_flushed() -> bool:
    tiny = torch.tensor(1e-40, dtype=torch.float32)
    return bool((tiny * 1.0) == 0)


def poly_lr(epoch: int, cfg: TrainConfig) -> float:
    """Polynomial decay ``lr_init * (1 - epoch / max_epoch) ** power``."""
    if not 0 <= epoch <= cfg.max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epoch}]")
    return cfg.lr_init * (1.0 - epoch / cfg.max_epoch) ** cfg.lr_power


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    config: TrainConfig
    epoch: int
    rng_state: Optional[np.ndarray] = None
    vocab: AttributeVocabulary = DEFAULT_VOCAB
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: PTINet, cfg: TrainConfig, epoch: int,
                   vocab: AttributeVocabulary = DEFAULT_VOCAB, extra: Optional[dict] = None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
        rng = torch.get_rng_state().numpy().copy()
        return cls(state, cfg, epoch, rng, vocab, dict(extra or {}))

    def build_model(self) -> PTINet:
        model = PTINet(self.config.encoder, self.config.decoder)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, path: str) -> None:
        entries = dict(self.state)
        if self.rng_state is not None:
            entries["__rng_state__"] = self.rng_state.astype(np.float32)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
            for name, arr in entries.items():
                arr = np.ascontiguousarray(arr, dtype="<f4")
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
            snapshot = json.dumps({
                "format_version": CHECKPOINT_VERSION,
                "config": to_dict(self.config),
                "epoch": self.epoch,
                "vocab": json.loads(self.vocab.to_json()),
                "extra": self.extra,
            }).encode("utf-8")
            fh.write(struct.pack("<I", len(snapshot)))
            fh.write(snapshot)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a PTCK checkpoint")
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            entries[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
        (snap_len,) = struct.unpack_from("<I", data, pos)
        snapshot = json.loads(data[pos + 4:pos + 4 + snap_len].decode("utf-8"))
        rng = entries.pop("__rng_state__", None)
        return cls(
            state=entries,
            config=train_config_from_dict(snapshot["config"]),
            epoch=snapshot["epoch"],
            rng_state=None if rng is None else rng.astype(np.uint8),
            vocab=AttributeVocabulary.from_json(json.dumps(snapshot["vocab"])),
            extra=snapshot.get("extra", {}),
        )


# ---------------------------------------------------------------- evaluation

def evaluate_predictions(pred_boxes, probs, samples: Sequence[PedestrianSample], n: int,
                         center_only: bool = False, final_step_only: bool = False):
    gt = np.stack([s.future_boxes[:n] for s in samples])
    labels = np.stack([s.future_intentions[:n] for s in samples])
    f1, acc = classification_report(probs, labels, final_step_only=final_step_only)
    return ade(pred_boxes, gt, center_only), fde(pred_boxes, gt, center_only), f1, acc


def evaluate(predictor, samples: Sequence[PedestrianSample], horizons: Sequence[float] = (0.5,),
             trained_n: Optional[int] = None, allow_prefix: bool = False,
             center_only: bool = False, final_step_only: bool = False) -> MetricReport:
    """Metric report for ``predictor`` (anything with ``predict_arrays(samples, n)``).

    Samples must hold source-pixel boxes. A horizon longer than ``trained_n``
    is an error; a shorter one needs ``allow_prefix`` (the prefix of a longer
    rollout is scored).
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    report = MetricReport(sample_count=len(samples))
    f1s, accs = [], []
    for seconds in horizons:
        n = int(round(seconds * 30))
        if trained_n is not None:
            if n > trained_n:
                raise ValueError(f"horizon {seconds}s (n={n}) exceeds the trained n={trained_n}")
            if n < trained_n and not allow_prefix:
                raise ValueError(f"horizon {seconds}s (n={n}) differs from trained n={trained_n}; "
                                 "enable prefix evaluation to score a rollout prefix")
        if any(s.n < n for s in samples):
            raise ValueError(f"samples carry fewer than n={n} future steps")
        boxes, probs = predictor.predict_arrays(samples, n)
        a, f, f1, acc = evaluate_predictions(boxes, probs, samples, n, center_only, final_step_only)
        key = horizon_key(seconds)
        report.ade_pixels[key] = a
        report.fde_pixels[key] = f
        f1s.append(f1)
        accs.append(acc)
    report.f1 = float(np.mean(f1s))
    report.accuracy = float(np.mean(accs))
    return report


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_traj: float
    loss_int: float
    val_ade: Optional[float] = None
    val_fde: Optional[float] = None
    val_f1: Optional[float] = None
    val_acc: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class TrainResult:
    model: PTINet
    last: Checkpoint
    best: Checkpoint
    log: list[EpochRecord]


def load_dataset(path: str, cfg: TrainConfig, vocab: AttributeVocabulary = DEFAULT_VOCAB):
    """Load a track file (or a directory holding ``tracks.jsonl``) into samples."""
    if os.path.isdir(path):
        path = os.path.join(path, "tracks.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    tracks = read_tracks(path)
    return build_samples(tracks, cfg.m, cfg.n, cfg.stride, root=os.path.dirname(path),
                         image_dims_target=cfg.encoder.image_size, toggles=cfg.encoder.toggles,
                         vocab=vocab).samples


def configure_for_vocab(cfg: TrainConfig, vocab: AttributeVocabulary) -> TrainConfig:
    enc = replace(cfg.encoder, attrs_width=vocab.attrs_width, behavior_width=vocab.behavior_width,
                  scene_width=vocab.scene_width)
    return replace(cfg, encoder=enc)


def _scalar(x: torch.Tensor) -> float:
    return float(x.detach())


def train(
    cfg: TrainConfig,
    train_samples: Optional[Sequence[PedestrianSample]] = None,
    val_samples: Optional[Sequence[PedestrianSample]] = None,
    vocab: AttributeVocabulary = DEFAULT_VOCAB,
    out_dir: Optional[str] = None,
    val_every: int = 1,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Adam + polynomial decay over ``cfg.max_epoch`` epochs; deterministic given ``cfg.seed``."""
    cfg = configure_for_vocab(cfg, vocab)
    if train_samples is None:
        train_samples = load_dataset(cfg.train_data, cfg, vocab)
    if val_samples is None and cfg.val_data:
        val_samples = load_dataset(cfg.val_data, cfg, vocab)
    train_samples = list(train_samples)
    if not train_samples:
        raise TrainingError("training set is empty")
    n = cfg.n
    if any(s.n != n for s in train_samples):
        raise TrainingError(f"training samples must have n={n} future steps")

    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    model = PTINet(cfg.encoder, cfg.decoder)
    model.fit_standardization(train_samples)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, eps=cfg.adam_epsilon,
                           weight_decay=cfg.weight_decay)
    toggles = cfg.encoder.toggles
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "log.jsonl"), "w")
    else:
        log_fh = None

    records: list[EpochRecord] = []
    best: Optional[Checkpoint] = None
    best_ade = math.inf
    # tiny recurrent activations otherwise turn into denormals and stall the CPU kernels
    flushed_before = _denormals_flushed()
    torch.set_flush_denormal(True)
    try:
        for epoch in range(cfg.max_epoch):
            lr = poly_lr(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = order_rng.permutation(len(train_samples))
            sums = np.zeros(3)
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                batch = collate(chunk, toggles.use_images, toggles.use_flow)
                out = model(batch, n, mode=TRAIN, generator=noise_gen,
                            reconstruct=cfg.loss.reconstruction_reg)
                l_traj = trajectory_loss(out.boxes, batch.future_boxes, out.latents.values(), cfg.loss,
                                         out.reconstructions)
                l_int = intention_loss(out.intention_probs, batch.future_intent, cfg.loss)
                loss = total_loss(l_traj, l_int, cfg.loss)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch + 1}, batch starting {start}: "
                        f"traj={_scalar(l_traj)} int={_scalar(l_int)}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums += len(chunk) * np.array([_scalar(loss), _scalar(l_traj), _scalar(l_int)])
            sums /= len(train_samples)
            rec = EpochRecord(epoch + 1, lr, *map(float, sums))
            is_last = epoch + 1 == cfg.max_epoch
            if val_samples and ((epoch + 1) % val_every == 0 or is_last):
                report = evaluate(model, val_samples, (cfg.horizon_seconds,))
                key = horizon_key(cfg.horizon_seconds)
                rec.val_ade, rec.val_fde = report.ade_pixels[key], report.fde_pixels[key]
                rec.val_f1, rec.val_acc = report.f1, report.accuracy
                if rec.val_ade < best_ade:
                    best_ade = rec.val_ade
                    best = Checkpoint.from_model(model, cfg, epoch + 1, vocab, {"val_ade": rec.val_ade})
            records.append(rec)
            log.info("epoch %d lr %.3g loss %.4f traj %.4f int %.4f val_ade %s", rec.epoch, lr,
                     rec.loss_total, rec.loss_traj, rec.loss_int, rec.val_ade)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        torch.set_flush_denormal(flushed_before)
        if log_fh:
            log_fh.close()

    model.eval()
    last = Checkpoint.from_model(model, cfg, cfg.max_epoch, vocab)
    if best is None:
        best = last
    if out_dir:
        last.save(os.path.join(out_dir, "last.ckpt"))
        best.save(os.path.join(out_dir, "best.ckpt"))
    return TrainResult(model, last, best, records)
