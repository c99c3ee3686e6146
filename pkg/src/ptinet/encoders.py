"""Encoding paths and their fusion into the shared feature vector F.

Paths, in fusion order: position-velocity LSTM-VAE (``pv``), attribute MLP
(``lcf_p``), behavior LSTM-VAE (``lcf_b``), scene LSTM-VAE (``lcf_s``),
image ConvLSTM (``gf_img``) and optical-flow backbone (``gf_o``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig

PATH_ORDER = ("pv", "lcf_p", "lcf_b", "lcf_s", "gf_img", "gf_o")
VAE_PATHS = ("pv", "lcf_b", "lcf_s")
TRAIN, EVAL = "train", "eval"


class ShapeError(ValueError):
    pass


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the last axis."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} vs log_var {tuple(self.log_var.shape)}")


def reparameterize(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """z = mean + exp(log_var / 2) * noise."""
    if noise.shape != g.mean.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match latent {tuple(g.mean.shape)}")
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def _check_width(x: torch.Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise ShapeError(f"{what}: expected last dim {width}, got {x.shape[-1]}")


class GaussianHead(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.mean = nn.Linear(in_features, out_features)
        self.log_var = nn.Linear(in_features, out_features)

    def forward(self, h: torch.Tensor) -> LatentGaussian:
        return LatentGaussian(self.mean(h), self.log_var(h))


class LSTMVAE(nn.Module):
    """Sequence autoencoder with a diagonal-Gaussian latent."""

    def __init__(self, input_width: int, hidden: int, layers: int, latent: int):
        super().__init__()
        self.input_width = input_width
        self.latent = latent
        self.encoder = nn.LSTM(input_width, hidden, layers, batch_first=True)
        self.posterior = GaussianHead(hidden, latent)
        self.decoder = nn.LSTM(latent, hidden, layers, batch_first=True)
        self.likelihood = GaussianHead(hidden, input_width)

    def encode(self, seq: torch.Tensor, mode: str = EVAL, noise: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, LatentGaussian]:
        """Encode ``(B, T, input_width)``; the feature is a posterior sample in
        train mode and the posterior mean in eval mode."""
        if seq.dim() != 3 or seq.shape[1] == 0:
            raise ShapeError(f"expected a nonempty (B, T, C) sequence, got {tuple(seq.shape)}")
        _check_width(seq, self.input_width, "lstm_vae_encode")
        _, (h, _) = self.encoder(seq)
        g = self.posterior(h[-1])
        if mode == EVAL:
            return g.mean, g
        if noise is None:
            noise = torch.randn(g.mean.shape, dtype=g.mean.dtype, generator=generator)
        return reparameterize(g, noise), g

    def reconstruct(self, z: torch.Tensor, steps: int) -> LatentGaussian:
        """Unroll the decoder ``steps`` times from z; per-step Gaussian over the input features."""
        _check_width(z, self.latent, "lstm_vae_reconstruct")
        out, _ = self.decoder(z.unsqueeze(1).expand(-1, steps, -1))
        return self.likelihood(out)


class AttributeMLP(nn.Module):
    def __init__(self, in_features: int, width: int, activation: bool = True):
        super().__init__()
        self.in_features = in_features
        self.fc1 = nn.Linear(in_features, width)
        self.fc2 = nn.Linear(width, width)
        # activation=False turns the MLP affine; used by the linearity tests
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_width(x, self.in_features, "mlp_encode")
        h = self.fc1(x)
        if self.activation:
            h = F.relu(h)
        return self.fc2(h)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


class ConvLSTMCell(nn.Module):
    """ConvLSTM whose input convolution is strided; the recurrent one keeps resolution."""

    def __init__(self, in_channels: int, filters: int, kernel: int, stride: int):
        super().__init__()
        self.filters = filters
        self.input_conv = nn.Conv2d(in_channels, 4 * filters, kernel, stride, padding=kernel // 2)
        self.hidden_conv = nn.Conv2d(filters, 4 * filters, kernel, 1, padding=kernel // 2, bias=False)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """``(B, T, C, H, W)`` -> hidden states ``(B, T, filters, H', W')``."""
        b, t = seq.shape[:2]
        x_gates = self.input_conv(seq.flatten(0, 1))
        # unbind keeps the backward pass linear in T (indexing would scatter into full-size zeros)
        per_step = x_gates.view(b, t, *x_gates.shape[1:]).unbind(1)
        c = None
        h = None
        outputs = []
        for gates in per_step:
            if h is not None:
                gates = gates + self.hidden_conv(h)
            i, f, o, g = gates.chunk(4, dim=1)
            i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
            c = i * g if c is None else f * c + i * g
            h = o * torch.tanh(c)
            outputs.append(h)
        return torch.stack(outputs, dim=1)


class ConvLSTMEncoder(nn.Module):
    """Stacked ConvLSTM blocks, each followed by max pooling, then a linear layer."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = tuple(cfg.image_size)
        self.pool = cfg.pool_size
        cells = []
        h, w = self.image_size
        channels = 3
        for _ in range(cfg.convlstm_blocks):
            cells.append(ConvLSTMCell(channels, cfg.convlstm_filters, cfg.convlstm_kernel, cfg.convlstm_stride))
            channels = cfg.convlstm_filters
            h = conv_output_size(h, cfg.convlstm_kernel, cfg.convlstm_stride) // self.pool
            w = conv_output_size(w, cfg.convlstm_kernel, cfg.convlstm_stride) // self.pool
        if h < 1 or w < 1:
            raise ShapeError(f"image size {self.image_size} too small for {cfg.convlstm_blocks} blocks")
        self.cells = nn.ModuleList(cells)
        self.flat_dim = channels * h * w
        self.fc = nn.Linear(self.flat_dim, cfg.gf_img_dim)
        self.last_trace: list[tuple[int, int]] = []

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 5 or images.shape[2] != 3 or tuple(images.shape[-2:]) != self.image_size:
            raise ShapeError(f"expected (B, T, 3, {self.image_size[0]}, {self.image_size[1]}), "
                             f"got {tuple(images.shape)}")
        trace = [tuple(images.shape[-2:])]
        x = images
        last = len(self.cells) - 1
        for k, cell in enumerate(self.cells):
            hs = cell(x)
            if k == last:
                x = F.max_pool2d(hs[:, -1], self.pool)
            else:
                b, t = hs.shape[:2]
                pooled = F.max_pool2d(hs.flatten(0, 1), self.pool)
                x = pooled.view(b, t, *pooled.shape[1:])
            trace.append(tuple(x.shape[-2:]))
        self.last_trace = trace
        return self.fc(x.flatten(1))


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, padding=1)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.conv2(F.relu(self.conv1(x))) + skip)


class SmallResidualCNN(nn.Module):
    """Strided stem plus four residual blocks, global spatial pool, linear head.

    Max pooling is the default: a pedestrian covers well under 1% of a desk
    raster, so a spatial mean buries its flow under the ego-motion background.
    """

    def __init__(self, channels: int, out_dim: int, pool: str = "max"):
        super().__init__()
        self.pool = pool
        c = channels
        self.stem = nn.Conv2d(2, c, 5, 2, padding=2)
        self.blocks = nn.Sequential(
            ResidualBlock(c, c, 2),
            ResidualBlock(c, 2 * c, 2),
            ResidualBlock(2 * c, 2 * c, 2),
            ResidualBlock(2 * c, 2 * c, 1),
        )
        self.fc = nn.Linear(2 * c, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.blocks(F.relu(self.stem(x)))
        x = x.amax(dim=(2, 3)) if self.pool == "max" else x.mean(dim=(2, 3))
        return self.fc(x)


def residual50(out_dim: int) -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None, num_classes=out_dim)
    net.conv1 = nn.Conv2d(2, 64, kernel_size=7, stride=2, padding=3, bias=False)
    return net


class FlowEncoder(nn.Module):
    """Per-frame backbone over flow fields, mean-pooled over time."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = tuple(cfg.image_size)
        if cfg.flow_backbone == "residual-50":
            self.backbone = residual50(cfg.gf_o_dim)
        else:
            self.backbone = SmallResidualCNN(cfg.flow_channels, cfg.gf_o_dim, cfg.flow_spatial_pool)

    def forward(self, flows: torch.Tensor) -> torch.Tensor:
        if flows.dim() != 5 or flows.shape[2] != 2 or tuple(flows.shape[-2:]) != self.image_size:
            raise ShapeError(f"expected (B, T, 2, {self.image_size[0]}, {self.image_size[1]}), "
                             f"got {tuple(flows.shape)}")
        b, t = flows.shape[:2]
        per_frame = self.backbone(flows.flatten(0, 1))
        return per_frame.view(b, t, -1).mean(dim=1)


@dataclass
class FusedFeature:
    vector: torch.Tensor  # (B, |F|)
    offsets: dict[str, tuple[int, int]]

    def segment(self, name: str) -> torch.Tensor:
        start, stop = self.offsets[name]
        return self.vector[..., start:stop]


def path_offsets(cfg: EncoderConfig) -> dict[str, tuple[int, int]]:
    offsets = {}
    start = 0
    for name in PATH_ORDER:
        stop = start + cfg.path_dims[name]
        offsets[name] = (start, stop)
        start = stop
    return offsets


class PTINetEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        hid, layers, lat = cfg.lstm_hidden, cfg.lstm_layers, cfg.latent_dim
        self.pv = LSTMVAE(cfg.pv_width, hid, layers, lat)
        self.lcf_p = AttributeMLP(cfg.attrs_width, cfg.mlp_width)
        self.lcf_b = LSTMVAE(cfg.behavior_width, hid, layers, lat)
        self.lcf_s = LSTMVAE(cfg.scene_width, hid, layers, lat)
        self.gf_img = ConvLSTMEncoder(cfg)
        self.gf_o = FlowEncoder(cfg)
        # per-feature standardization of the position-velocity input; fitted from data
        self.register_buffer("pv_mean", torch.zeros(cfg.pv_width))
        self.register_buffer("pv_std", torch.ones(cfg.pv_width))
        self.offsets = path_offsets(cfg)

    def forward(
        self,
        pv: torch.Tensor,
        attrs: torch.Tensor,
        behavior: torch.Tensor,
        scene: Optional[torch.Tensor],
        images: Optional[torch.Tensor],
        flows: Optional[torch.Tensor],
        mode: str = EVAL,
        noise: Optional[dict[str, torch.Tensor]] = None,
        generator: Optional[torch.Generator] = None,
    ) -> tuple[FusedFeature, dict[str, LatentGaussian]]:
        toggles = self.cfg.toggles
        noise = noise or {}
        batch = pv.shape[0]
        dims = self.cfg.path_dims
        latents: dict[str, LatentGaussian] = {}
        parts: dict[str, torch.Tensor] = {}

        def zeros(name):
            return pv.new_zeros(batch, dims[name])

        def run(name, fn):
            try:
                return fn()
            except ShapeError as exc:
                raise ShapeError(f"{name} path: {exc}") from exc

        pv_in = (pv - self.pv_mean) / self.pv_std
        parts["pv"], latents["pv"] = run(
            "pv", lambda: self.pv.encode(pv_in, mode, noise.get("pv"), generator))
        parts["lcf_p"] = run("lcf_p", lambda: self.lcf_p(attrs))
        parts["lcf_b"], latents["lcf_b"] = run(
            "lcf_b", lambda: self.lcf_b.encode(behavior, mode, noise.get("lcf_b"), generator))
        if scene is not None and toggles.use_scene_attrs:
            parts["lcf_s"], latents["lcf_s"] = run(
                "lcf_s", lambda: self.lcf_s.encode(scene, mode, noise.get("lcf_s"), generator))
        else:
            parts["lcf_s"] = zeros("lcf_s")
        if images is not None and toggles.use_images:
            parts["gf_img"] = run("gf_img", lambda: self.gf_img(images))
        else:
            parts["gf_img"] = zeros("gf_img")
        if flows is not None and toggles.use_flow:
            parts["gf_o"] = run("gf_o", lambda: self.gf_o(flows))
        else:
            parts["gf_o"] = zeros("gf_o")
        vector = torch.cat([parts[name] for name in PATH_ORDER], dim=-1)
        return FusedFeature(vector, dict(self.offsets)), latents


def zero_parameters(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def init_uniform(module: nn.Module, bound: float = 1.0, seed: int = 0) -> nn.Module:
    """Overwrite every parameter with U(-bound, bound) draws; used in tests."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * bound)
    return module


def gaussian_nll(g: LatentGaussian, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``target`` under a diagonal Gaussian, summed over features."""
    nll = 0.5 * (g.log_var + (target - g.mean) ** 2 * torch.exp(-g.log_var) + math.log(2 * math.pi))
    return nll.sum(-1).mean()
