"""
Calibrator C(.) = {E_T, D_T}: a modality adapter and a vector-quantized
encoder/decoder turning a target-modality tensor X into an image-like J.

The latent grid has stride 8 relative to the image. Every latent cell is
replaced by its nearest codebook entry; gradients skip the lookup unchanged
(straight-through), and the codebook itself learns from the codebook loss.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from modcal.core import seeding
from modcal.core.errors import ConfigurationError, InputError, StateError
from modcal.core.tensorio import load_container, save_container, write_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibratorConfig:
    image_size: int = 128
    input_shape: Tuple[int, int, int] = (1, 64, 64)
    channel: int = 32
    codebook_size: int = 64
    beta: float = 0.25
    hidden: int = 32
    adapter_channels: int = 8
    latent_stride: int = 8

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any], input_shape: Tuple[int, int, int]) -> "CalibratorConfig":
        cal = config.section("calibrator")
        return cls(image_size=config["data.canvas"], input_shape=tuple(input_shape),
                   channel=cal["channel"], codebook_size=cal["codebook_size"], beta=cal["beta"],
                   hidden=cal["hidden"], adapter_channels=cal["adapter_channels"])

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_stride

    @property
    def spatial_input(self) -> bool:
        return self.input_shape[1] > 1 or self.input_shape[2] > 1

    @property
    def encoder_downsamples(self) -> int:
        """Stride-2 stages E_T needs to bring the adapter output to the latent grid."""
        if not self.spatial_input:
            return 0
        ratio = self.input_shape[1] / self.latent_size
        return int(round(math.log2(ratio)))

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ConfigurationError("codebook needs at least 2 entries")
        if self.image_size % self.latent_stride:
            raise ConfigurationError(f"image size {self.image_size} not divisible by {self.latent_stride}")
        if self.spatial_input:
            h, w = self.input_shape[1:]
            ratio = h / self.latent_size
            if h != w or ratio < 1 or 2 ** self.encoder_downsamples != ratio:
                raise ConfigurationError(
                    f"spatial input {h}x{w} must be square and a power-of-two multiple of the "
                    f"{self.latent_size}x{self.latent_size} latent grid")


@dataclass
class LatentGrid:
    """z_e and z_q are [B, channel, h, w]; indices is [B, h, w]."""
    z_e: torch.Tensor
    z_q: torch.Tensor
    indices: torch.Tensor


@dataclass
class VQLosses:
    rec: torch.Tensor
    codebook: torch.Tensor
    commit: torch.Tensor
    total: torch.Tensor


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codebook rows bit-exactly, backward copies the gradient to z_e."""

    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def nearest_codes(flat: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest codebook row for each row of ``flat``; ties go to the lowest index."""
    indices = []
    for start in range(0, flat.shape[0], chunk):
        part = flat[start:start + chunk]
        distances = ((part[:, None, :] - codebook[None, :, :]) ** 2).sum(dim=-1)
        indices.append(torch.argmin(distances, dim=1))
    if not indices:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(indices)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(index_map [B, h, w], z_q [B, channel, h, w]) with a straight-through backward."""
    if codebook.dim() != 2 or codebook.shape[0] == 0:
        raise ConfigurationError("codebook is empty")
    if z_e.shape[1] != codebook.shape[1]:
        raise InputError(f"latent channel {z_e.shape[1]} does not match codebook dimension {codebook.shape[1]}")
    b, c, h, w = z_e.shape
    flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, c)
    index = nearest_codes(flat, codebook.detach())
    rows = codebook.detach()[index].view(b, h, w, c).permute(0, 3, 1, 2)
    return index.view(b, h, w), _StraightThrough.apply(z_e, rows)


def vq_losses(z_e: torch.Tensor, z_q: torch.Tensor, reconstruction: torch.Tensor,
              target: torch.Tensor, beta: float) -> VQLosses:
    """Reconstruction + codebook (stop-grad on z_e) + beta * commitment (stop-grad on z_q).

    ``z_q`` must be the raw codebook lookup, so the codebook term reaches the codebook.
    """
    rec = F.mse_loss(reconstruction, target)
    codebook = F.mse_loss(z_q, z_e.detach())
    commit = F.mse_loss(z_e, z_q.detach())
    return VQLosses(rec, codebook, commit, rec + codebook + beta * commit)


class Codebook(nn.Module):
    """p learnable vectors plus per-entry usage counters."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))
        self.register_buffer("usage", torch.zeros(size))

    def forward(self, z_e: torch.Tensor) -> LatentGrid:
        index, z_st = quantize(z_e, self.weight)
        if self.training:
            self.usage += torch.bincount(index.reshape(-1), minlength=self.weight.shape[0]).to(self.usage.dtype)
        return LatentGrid(z_e, z_st, index)

    def lookup(self, index: torch.Tensor) -> torch.Tensor:
        """Differentiable w.r.t. the codebook: [B, h, w] -> [B, channel, h, w]."""
        return self.weight[index].permute(0, 3, 1, 2)

    def dead_entries(self) -> int:
        return int((self.usage == 0).sum())


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.SiLU(), nn.Conv2d(channels, channels, 3, padding=1),
            nn.SiLU(), nn.Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, hidden: int, channel: int, downsamples: int):
        super().__init__()
        layers = [nn.Conv2d(in_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(downsamples):
            layers += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        layers += [ResidualBlock(hidden), nn.SiLU(), nn.Conv2d(hidden, channel, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    """Latent grid -> 3-channel image, upsampling by ``stride``."""

    def __init__(self, channel: int, hidden: int, stride: int):
        super().__init__()
        layers = [nn.Conv2d(channel, hidden, 3, padding=1), ResidualBlock(hidden), nn.SiLU()]
        for _ in range(int(round(math.log2(stride)))):
            layers += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(hidden, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class ModalityAdapter(nn.Module):
    """Conv stem for spatial X; linear lift to the latent grid for flat X."""

    def __init__(self, config: CalibratorConfig):
        super().__init__()
        self.config = config
        c_in = config.input_shape[0]
        if config.spatial_input:
            self.net = nn.Sequential(nn.Conv2d(c_in, config.adapter_channels, 3, padding=1), nn.SiLU())
        else:
            grid = config.latent_size
            self.net = nn.Linear(c_in, config.adapter_channels * grid * grid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise InputError(f"expected X of shape [B, {', '.join(map(str, self.config.input_shape))}], "
                             f"got {tuple(x.shape)}")
        if self.config.spatial_input:
            return self.net(x)
        grid = self.config.latent_size
        return self.net(x.flatten(1)).view(x.shape[0], self.config.adapter_channels, grid, grid)


def adapt_modality(x: torch.Tensor, adapter: ModalityAdapter) -> torch.Tensor:
    """Image-like layout for the VQ encoder stem."""
    return adapter(x)


class Calibrator(nn.Module):
    """C(.): X -> J with J of shape [B, 3, image_size, image_size]."""

    def __init__(self, config: CalibratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.adapter = ModalityAdapter(config)
        self.encoder = Encoder(config.adapter_channels, config.hidden, config.channel,
                               config.encoder_downsamples)
        self.codebook = Codebook(config.codebook_size, config.channel)
        self.decoder = Decoder(config.channel, config.hidden, config.latent_stride)
        self.initialized = False

    def encode(self, x: torch.Tensor) -> LatentGrid:
        return self.codebook(self.encoder(adapt_modality(x, self.adapter)))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, LatentGrid]:
        if not self.initialized:
            raise StateError("calibrator parameters are not initialized")
        latent = self.encode(x)
        return self.decoder(latent.z_q), latent

    def calibrate(self, x: torch.Tensor) -> torch.Tensor:
        j, _ = self(x)
        return j

    def parameter_groups(self) -> Dict[str, list]:
        return {
            "adapter": list(self.adapter.parameters()),
            "encoder": list(self.encoder.parameters()),
            "codebook": list(self.codebook.parameters()),
            "decoder": list(self.decoder.parameters()),
        }


def build_calibrator(config: CalibratorConfig, seed: int) -> Calibrator:
    with seeding.seeded(seed):
        calibrator = Calibrator(config)
    calibrator.initialized = True
    return calibrator


def calibrate(calibrator: Calibrator, x: torch.Tensor) -> torch.Tensor:
    """J for a batch [B, ...] or a single X."""
    if x.dim() == 3:
        return calibrator.calibrate(x[None])[0]
    return calibrator.calibrate(x)


def save_calibrator(path, calibrator: Calibrator) -> None:
    config = asdict(calibrator.config)
    save_container(path, {"kind": "calibrator", "config": config}, calibrator.state_dict())


def load_calibrator(path) -> Calibrator:
    meta, tensors = load_container(path)
    if meta.get("kind") != "calibrator":
        raise ConfigurationError(f"{path} is not a calibrator checkpoint")
    config = dict(meta["config"])
    config["input_shape"] = tuple(config["input_shape"])
    calibrator = Calibrator(CalibratorConfig(**config))
    calibrator.load_state_dict(tensors)
    calibrator.initialized = True
    calibrator.eval()
    return calibrator


def export_codebook(path, codebook: Codebook) -> None:
    write_tensor(path, codebook.weight)
