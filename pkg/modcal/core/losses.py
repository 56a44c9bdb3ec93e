"""
Target-training losses: SSIM, decayed semantic supervision and the skipped
inverted attention mask.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from modcal.core.detector import TAP_LAYER, LossBreakdown, SourceDetector, source_loss
from modcal.core.errors import ConfigurationError, InputError
from modcal.core.synthdata import BoxAnnotation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int, sigma: float, channels: int, dtype=torch.float32) -> torch.Tensor:
    """[channels, 1, size, size] normalized Gaussian, centred for odd and even sizes."""
    centre = (size - 1) / 2.0
    g = torch.tensor([math.exp(-((x - centre) ** 2) / (2 * sigma ** 2)) for x in range(size)], dtype=dtype)
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.expand(channels, 1, size, size).contiguous()


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over valid windows and channels of [B, C, H, W] (or [C, H, W]) tensors."""
    if a.shape != b.shape:
        raise InputError(f"ssim needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    if a.dim() != 4:
        raise InputError("ssim expects image tensors")
    channels = a.shape[1]
    size = min(SSIM_WINDOW, a.shape[2], a.shape[3])
    window = gaussian_window(size, SSIM_SIGMA, channels, a.dtype).to(a.device)

    def filt(x):
        return F.conv2d(x, window, groups=channels)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    sigma_a = filt(a * a) - mu_a * mu_a
    sigma_b = filt(b * b) - mu_b * mu_b
    sigma_ab = filt(a * b) - mu_a * mu_b

    numerator = (2 * mu_a * mu_b + c1) * (2 * sigma_ab + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (sigma_a + sigma_b + c2)
    return (numerator / denominator).mean()


# ---------------------------------------------------------------- DSS

@dataclass(frozen=True)
class DecaySchedule:
    """lambda(t) = decay ** t; decay 1.0 is plain (non-decayed) semantic supervision."""
    decay: float = 0.9999

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay factor must be in (0, 1], got {self.decay}")

    def __call__(self, t: int) -> float:
        return dss_lambda(t, self.decay)


def dss_lambda(t: int, decay: float = 0.9999) -> float:
    if t < 0:
        raise InputError("iteration must be >= 0")
    return float(decay) ** int(t)


@dataclass
class DSSLoss:
    total: torch.Tensor
    ssim_term: torch.Tensor
    l1_term: torch.Tensor
    weight: float
    source: LossBreakdown

    def as_floats(self) -> Dict[str, float]:
        return {"dss_ssim": float(self.ssim_term), "dss_l1": float(self.l1_term),
                "lambda_dss": self.weight, **self.source.as_floats("source_")}


def image_terms(j: torch.Tensor, j_t: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(1 - ssim, mean absolute error) between J and its semantic target."""
    return 1 - ssim(j, j_t), (j - j_t).abs().mean()


def dss_loss(j: torch.Tensor, j_t: torch.Tensor, detector: SourceDetector,
             annotations: Sequence[Sequence[BoxAnnotation]], t: int, schedule: DecaySchedule,
             source: Optional[LossBreakdown] = None) -> DSSLoss:
    """lambda(t) * ((1 - ssim) + L1) + L_S(S(J), Y); ``source`` reuses an existing forward pass."""
    if source is None:
        source = source_loss(detector(j), annotations, detector.config)
    ssim_term, l1_term = image_terms(j, j_t)
    weight = schedule(t)
    return DSSLoss(weight * (ssim_term + l1_term) + source.total, ssim_term, l1_term, weight, source)


# ---------------------------------------------------------------- SIA

@dataclass(frozen=True)
class SIAConfig:
    fraction: float = 0.1
    tap_layer: str = TAP_LAYER
    weight: float = 1.0
    every: int = 1
    supplement: bool = True

    def validate(self, layers: Sequence[str] = (TAP_LAYER,)) -> None:
        if not 0 <= self.fraction <= 1:
            raise ConfigurationError(f"SIA fraction must be in [0, 1], got {self.fraction}")
        if self.tap_layer not in layers:
            raise ConfigurationError(f"tap layer {self.tap_layer!r} not in {list(layers)}")
        if self.every < 1:
            raise ConfigurationError("SIA cadence must be >= 1")


@dataclass
class AttentionMask:
    """Binary mask [B, 1, H, W]; zeros mark the skipped high-attention cells."""
    values: torch.Tensor
    fraction: float

    def zeros(self) -> torch.Tensor:
        return (self.values == 0).flatten(1).sum(dim=1)


def round_count(total: int, fraction: float) -> int:
    """round(fraction * total), halves rounding up."""
    return int(math.floor(fraction * total + 0.5))


def sia_mask(grad: torch.Tensor, config: SIAConfig, size: Optional[Tuple[int, int]] = None) -> AttentionMask:
    """Zero the round(p * N) cells with the largest channel-summed |grad|.

    Ranking uses a stable descending sort, so ties go to the lower row-major
    index. An all-zero gradient yields an all-ones mask.
    """
    if grad.dim() == 3:
        grad = grad[None]
    if not torch.isfinite(grad).all():
        raise InputError("attention gradient is not finite")
    sums = grad.detach().abs().sum(dim=1, keepdim=True)
    if size is not None and tuple(sums.shape[-2:]) != tuple(size):
        sums = F.interpolate(sums, size=size, mode="nearest")

    batch, _, h, w = sums.shape
    flat = sums.reshape(batch, -1)
    values = torch.ones_like(flat)
    k = round_count(h * w, config.fraction)
    for b in range(batch):
        if k == 0 or not (flat[b] > 0).any():
            continue
        order = torch.sort(flat[b], descending=True, stable=True).indices
        values[b, order[:k]] = 0
    return AttentionMask(values.view(batch, 1, h, w), config.fraction)


def tap_gradient(detector: SourceDetector, j: torch.Tensor, annotations: Sequence[Sequence[BoxAnnotation]],
                 tap_layer: str = TAP_LAYER) -> Tuple[torch.Tensor, LossBreakdown]:
    """(dL_S/d features[tap], L_S) for one forward pass; the loss graph is retained."""
    raw, features = detector(j, return_features=True)
    if tap_layer not in features:
        raise ConfigurationError(f"detector has no layer {tap_layer!r}")
    losses = source_loss(raw, annotations, detector.config)
    (grad,) = torch.autograd.grad(losses.total, features[tap_layer], retain_graph=True)
    return grad, losses


def sia_loss(detector: SourceDetector, j: torch.Tensor, mask: AttentionMask,
             annotations: Sequence[Sequence[BoxAnnotation]]) -> LossBreakdown:
    """L_S(S(A * J), Y); the mask broadcasts over J's channels."""
    if tuple(mask.values.shape[-2:]) != tuple(j.shape[-2:]):
        raise InputError(f"mask {tuple(mask.values.shape[-2:])} does not match J {tuple(j.shape[-2:])}")
    values = mask.values.to(dtype=j.dtype, device=j.device)
    return source_loss(detector(values * j), annotations, detector.config)
