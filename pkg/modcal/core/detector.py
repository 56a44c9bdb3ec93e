"""
Source detector S(.): a small anchor-free, single-level detector.

Each object is assigned to the stride-8 cell containing its box centre. The
head predicts per-cell class logits, objectness and (left, top, right, bottom)
distances from the cell centre in units of the stride.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, sigmoid_focal_loss

from modcal.core import seeding
from modcal.core.errors import ConfigurationError, InputError, NumericError
from modcal.core.synthdata import Box, BoxAnnotation
from modcal.core.tensorio import load_container, save_container

logger = logging.getLogger(__name__)

TAP_LAYER = "c4"


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 128
    in_channels: int = 3
    width: int = 16
    num_classes: int = 3
    lambda_bbox: float = 1.0
    lambda_cls: float = 1.0
    lambda_mask: float = 0.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    max_detections: int = 50
    stride: int = 8

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "DetectorConfig":
        det = config.section("detector")
        return cls(input_size=config["data.canvas"], num_classes=config["data.num_classes"],
                   width=det["width"], lambda_bbox=det["lambda_bbox"], lambda_cls=det["lambda_cls"],
                   lambda_mask=det["lambda_mask"], focal_alpha=det["focal_alpha"],
                   focal_gamma=det["focal_gamma"], score_threshold=det["score_threshold"],
                   nms_iou=det["nms_iou"])

    def validate(self) -> None:
        if self.lambda_bbox < 0 or self.lambda_cls < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.lambda_mask != 0:
            raise ConfigurationError("lambda_mask must be 0: there is no mask head")
        if self.input_size % (2 * self.stride):
            raise ConfigurationError(f"input size {self.input_size} must be divisible by {2 * self.stride}")

    @property
    def grid(self) -> int:
        return self.input_size // self.stride


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: Box
    score: float

    def to_dict(self) -> Dict[str, Any]:
        return {"class_id": self.class_id, "box": list(self.box), "score": self.score}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Detection":
        return cls(int(data["class_id"]), tuple(float(v) for v in data["box"]), float(data["score"]))


Detections = List[Detection]


@dataclass
class RawHead:
    """Per-cell head outputs, channel-first: [B, K, h, w], [B, 4, h, w], [B, 1, h, w]."""
    cls_logits: torch.Tensor
    box_reg: torch.Tensor
    objectness: torch.Tensor

    def check_finite(self, step: Optional[int] = None) -> None:
        for name in ("cls_logits", "box_reg", "objectness"):
            if not torch.isfinite(getattr(self, name)).all():
                raise NumericError(f"non-finite values in head output {name}", step=step)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    bbox: torch.Tensor
    cls: torch.Tensor

    def as_floats(self, prefix: str = "") -> Dict[str, float]:
        return {f"{prefix}total": float(self.total), f"{prefix}bbox": float(self.bbox),
                f"{prefix}cls": float(self.cls)}


def _conv(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    # SiLU keeps the input gradient smooth for finite-difference checks
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1), nn.SiLU())


class SourceDetector(nn.Module):
    """Backbone with stride-8 (c3) and stride-16 (c4) maps and one stride-8 head."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.width
        self.stem = nn.Sequential(_conv(config.in_channels, w, 2), _conv(w, w))
        self.c2 = nn.Sequential(_conv(w, 2 * w, 2), _conv(2 * w, 2 * w))
        self.c3 = nn.Sequential(_conv(2 * w, 4 * w, 2), _conv(4 * w, 4 * w))
        self.c4 = nn.Sequential(_conv(4 * w, 4 * w, 2), _conv(4 * w, 4 * w))
        self.lateral = nn.Conv2d(4 * w, 4 * w, 1)
        self.head = _conv(4 * w, 4 * w)
        self.cls_out = nn.Conv2d(4 * w, config.num_classes, 3, padding=1)
        self.box_out = nn.Conv2d(4 * w, 4, 3, padding=1)
        self.obj_out = nn.Conv2d(4 * w, 1, 3, padding=1)

        prior = -math.log((1 - 0.01) / 0.01)
        nn.init.constant_(self.cls_out.bias, prior)
        nn.init.constant_(self.obj_out.bias, prior)

    def check_input(self, images: torch.Tensor) -> None:
        size = self.config.input_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (self.config.in_channels, size, size):
            raise InputError(
                f"expected images of shape [B, {self.config.in_channels}, {size}, {size}], "
                f"got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor, return_features: bool = False):
        self.check_input(images)
        f3 = self.c3(self.c2(self.stem(images)))
        f4 = self.c4(f3)
        merged = f3 + F.interpolate(self.lateral(f4), scale_factor=2, mode="nearest")
        h = self.head(merged)
        raw = RawHead(self.cls_out(h), self.box_out(h), self.obj_out(h))
        if return_features:
            return raw, {"c3": f3, TAP_LAYER: f4}
        return raw


def build_detector(config: DetectorConfig, seed: int) -> SourceDetector:
    with seeding.seeded(seed):
        return SourceDetector(config)


# ---------------------------------------------------------------- targets and loss

def encode_targets(annotations: Sequence[Sequence[BoxAnnotation]], config: DetectorConfig,
                   dtype: torch.dtype = torch.float32) -> Dict[str, torch.Tensor]:
    """Centre-cell assignment; on collisions the smaller object wins."""
    batch, grid, stride = len(annotations), config.grid, config.stride
    cls_target = torch.zeros(batch, config.num_classes, grid, grid, dtype=dtype)
    box_target = torch.zeros(batch, 4, grid, grid, dtype=dtype)
    positive = torch.zeros(batch, grid, grid, dtype=torch.bool)

    for b, objects in enumerate(annotations):
        ordered = sorted(objects, key=lambda a: -(a.box[2] - a.box[0]) * (a.box[3] - a.box[1]))
        for ann in ordered:
            x0, y0, x1, y1 = ann.box
            col = min(grid - 1, max(0, int((x0 + x1) / 2 // stride)))
            row = min(grid - 1, max(0, int((y0 + y1) / 2 // stride)))
            cx, cy = (col + 0.5) * stride, (row + 0.5) * stride
            cls_target[b, :, row, col] = 0
            cls_target[b, ann.class_id, row, col] = 1
            box_target[b, :, row, col] = torch.tensor(
                [cx - x0, cy - y0, x1 - cx, y1 - cy], dtype=dtype) / stride
            positive[b, row, col] = True

    return {"cls": cls_target, "box": box_target, "positive": positive,
            "objectness": positive[:, None].to(dtype)}


def source_loss(raw: RawHead, annotations: Sequence[Sequence[BoxAnnotation]],
                config: DetectorConfig, reduction: str = "mean") -> LossBreakdown:
    """lambda_bbox * L_bbox + lambda_cls * L_cls (the mask term has weight 0 and no head).

    L_cls is the focal loss over class logits plus BCE over objectness, L_bbox the
    L1 distance error on positive cells; both per image normalised by the number of
    positives. ``reduction`` is "mean", "sum" or "none" (per-image vectors).
    """
    if len(annotations) != raw.cls_logits.shape[0]:
        raise InputError(f"{len(annotations)} annotation lists for a batch of {raw.cls_logits.shape[0]}")
    targets = encode_targets(annotations, config, dtype=raw.cls_logits.dtype)
    targets = {k: v.to(raw.cls_logits.device) for k, v in targets.items()}
    num_pos = targets["positive"].sum(dim=(1, 2)).clamp(min=1).to(raw.cls_logits.dtype)

    focal = sigmoid_focal_loss(raw.cls_logits, targets["cls"], alpha=config.focal_alpha,
                               gamma=config.focal_gamma, reduction="none").sum(dim=(1, 2, 3))
    objectness = F.binary_cross_entropy_with_logits(
        raw.objectness, targets["objectness"], reduction="none").sum(dim=(1, 2, 3))
    cls_loss = (focal + objectness) / num_pos

    mask = targets["positive"][:, None].to(raw.box_reg.dtype)
    bbox_loss = ((raw.box_reg - targets["box"]).abs() * mask).sum(dim=(1, 2, 3)) / num_pos

    if reduction == "none":
        bbox, cls = bbox_loss, cls_loss
    elif reduction in ("mean", "sum"):
        reduce = torch.mean if reduction == "mean" else torch.sum
        bbox, cls = reduce(bbox_loss), reduce(cls_loss)
    else:
        raise InputError(f"unknown reduction: {reduction}")
    return LossBreakdown(config.lambda_bbox * bbox + config.lambda_cls * cls, bbox, cls)


# ---------------------------------------------------------------- inference

def decode_boxes(box_reg: torch.Tensor, config: DetectorConfig) -> torch.Tensor:
    """[B, 4, h, w] distances -> [B, 4, h, w] (x0, y0, x1, y1) clipped to the canvas."""
    grid, stride = box_reg.shape[-1], config.stride
    centres = (torch.arange(grid, dtype=box_reg.dtype, device=box_reg.device) + 0.5) * stride
    cy, cx = torch.meshgrid(centres, centres, indexing="ij")
    dist = box_reg.clamp(min=0) * stride
    boxes = torch.stack([cx - dist[:, 0], cy - dist[:, 1], cx + dist[:, 2], cy + dist[:, 3]], dim=1)
    return boxes.clamp(0, config.input_size)


def detections_from_raw(raw: RawHead, config: DetectorConfig,
                        score_threshold: Optional[float] = None) -> List[Detections]:
    """Scores above the threshold, class-wise NMS, at most max_detections per image."""
    threshold = config.score_threshold if score_threshold is None else score_threshold
    scores = torch.sigmoid(raw.cls_logits) * torch.sigmoid(raw.objectness)
    boxes = decode_boxes(raw.box_reg, config)
    num_classes = scores.shape[1]

    results = []
    for b in range(scores.shape[0]):
        flat_scores = scores[b].reshape(-1)
        flat_boxes = boxes[b].reshape(4, -1).t().repeat(num_classes, 1)
        labels = torch.arange(num_classes).repeat_interleave(scores.shape[2] * scores.shape[3])
        keep = (flat_scores > threshold) & (flat_boxes[:, 2] > flat_boxes[:, 0]) & (flat_boxes[:, 3] > flat_boxes[:, 1])
        kept_boxes, kept_scores, kept_labels = flat_boxes[keep], flat_scores[keep], labels[keep]
        order = batched_nms(kept_boxes.float(), kept_scores.float(), kept_labels, config.nms_iou)
        order = order[:config.max_detections]
        results.append([
            Detection(int(kept_labels[i]), tuple(float(v) for v in kept_boxes[i]), float(kept_scores[i]))
            for i in order
        ])
    return results


@torch.no_grad()
def infer(model: SourceDetector, images: torch.Tensor,
          score_threshold: Optional[float] = None) -> List[Detections]:
    """Detections for a batch [B, C, H, W] or a single image [C, H, W]."""
    if images.dim() == 3:
        images = images[None]
    was_training = model.training
    model.eval()
    try:
        raw = model(images)
    finally:
        model.train(was_training)
    return detections_from_raw(raw, model.config, score_threshold)


def infer_all(model: SourceDetector, images: torch.Tensor, batch_size: int = 64,
              score_threshold: Optional[float] = None) -> List[Detections]:
    results: List[Detections] = []
    for start in range(0, images.shape[0], batch_size):
        results.extend(infer(model, images[start:start + batch_size], score_threshold))
    return results


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class SourceSchedule:
    iterations: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    log_interval: int = 50

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "SourceSchedule":
        return cls(**config.section("source"))


class BatchSampler:
    """Seeded epoch-wise shuffling over sample indices."""

    def __init__(self, count: int, batch_size: int, seed: int):
        if count == 0:
            raise InputError("cannot sample batches from an empty dataset")
        self.count = count
        self.batch_size = min(batch_size, count)
        self.generator = seeding.generator(seed)
        self._order: List[int] = []

    def next(self) -> List[int]:
        if len(self._order) < self.batch_size:
            self._order += torch.randperm(self.count, generator=self.generator).tolist()
        batch, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return batch


def train_source(images: torch.Tensor, annotations: Sequence[Sequence[BoxAnnotation]],
                 config: DetectorConfig, schedule: SourceSchedule, seed: int,
                 on_log: Optional[Callable[[Dict[str, float]], None]] = None) -> SourceDetector:
    """Standard training of S on {I, Y}."""
    if images.shape[0] != len(annotations):
        raise InputError("images and annotations differ in length")
    model = build_detector(config, seeding.derive_seed(seed, seeding.STREAM_SOURCE_TRAIN, 0))
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    sampler = BatchSampler(images.shape[0], schedule.batch_size,
                           seeding.derive_seed(seed, seeding.STREAM_SOURCE_TRAIN, 1))

    for iteration in range(schedule.iterations):
        batch = sampler.next()
        raw = model(images[batch])
        raw.check_finite(step=iteration)
        losses = source_loss(raw, [annotations[i] for i in batch], config)
        if not torch.isfinite(losses.total):
            raise NumericError(f"source training diverged (loss {float(losses.total)})", step=iteration)

        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        optimizer.step()

        if iteration % schedule.log_interval == 0 or iteration == schedule.iterations - 1:
            record = {"iteration": iteration, **losses.as_floats("loss_")}
            logger.info("source it %d loss %.4f (bbox %.4f cls %.4f)", iteration,
                        record["loss_total"], record["loss_bbox"], record["loss_cls"])
            if on_log:
                on_log(record)

    model.eval()
    return model


# ---------------------------------------------------------------- checkpoints

def save_detector(path, model: SourceDetector) -> None:
    save_container(path, {"kind": "detector", "config": asdict(model.config)}, model.state_dict())


def load_detector(path) -> SourceDetector:
    meta, tensors = load_container(path)
    if meta.get("kind") != "detector":
        raise ConfigurationError(f"{path} is not a detector checkpoint")
    model = SourceDetector(DetectorConfig(**meta["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model
