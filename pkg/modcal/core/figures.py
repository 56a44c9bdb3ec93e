"""
Diagnostic panels from the tensors a target run logs: X, J, the |dL/dJ|
heatmap, the inverted attention mask, detections and J_T. Inverted corpus
items (J_S) get their own panels with the layout drawn on top.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw

from modcal.core.errors import StateError
from modcal.core.tensorio import read_tensor

logger = logging.getLogger(__name__)

DETECTION_COLOR = (230, 40, 40)
LABEL_COLOR = (40, 200, 60)


@dataclass
class FigureReport:
    written: List[Path] = field(default_factory=list)
    skipped: Dict[str, List[str]] = field(default_factory=dict)


def _normalize(array: np.ndarray) -> np.ndarray:
    lo, hi = float(array.min()), float(array.max())
    if hi - lo < 1e-12:
        return np.zeros_like(array, dtype=np.float64)
    return (array - lo) / (hi - lo)


def to_rgb(tensor: torch.Tensor) -> Image.Image:
    """[3, H, W] -> RGB image, min-max scaled."""
    array = _normalize(tensor.detach().cpu().numpy().astype(np.float64))
    return Image.fromarray((array.transpose(1, 2, 0) * 255).round().astype(np.uint8))


def modality_image(x: torch.Tensor) -> Image.Image:
    """Channel mean for spatial X; flat X is folded into the smallest square that holds it."""
    array = x.detach().cpu().numpy().astype(np.float64)
    if array.shape[1] > 1 or array.shape[2] > 1:
        plane = array.mean(axis=0)
    else:
        flat = array.reshape(-1)
        side = math.ceil(math.sqrt(flat.size))
        plane = np.zeros(side * side)
        plane[:flat.size] = flat
        plane = plane.reshape(side, side)
    return Image.fromarray((_normalize(plane) * 255).round().astype(np.uint8))


def heatmap(values: torch.Tensor, cmap: str = "inferno") -> Image.Image:
    rgba = colormaps[cmap](_normalize(values.detach().cpu().numpy().astype(np.float64)))
    return Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8))


def mask_image(mask: torch.Tensor) -> Image.Image:
    """Strictly binary: 0 for skipped cells, 255 elsewhere."""
    return Image.fromarray(np.where(mask.detach().cpu().numpy() > 0, 255, 0).astype(np.uint8))


def draw_boxes(image: Image.Image, boxes: Sequence[Dict], color, with_scores: bool = False) -> Image.Image:
    image = image.convert("RGB")
    draw = ImageDraw.Draw(image)
    for item in boxes:
        x0, y0, x1, y1 = item["box"]
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=color)
        text = f"{item['class_id']}" + (f" {item['score']:.2f}" if with_scores else "")
        draw.text((x0 + 1, y0 + 1), text, fill=color)
    return image


def render_sample(sample_dir: Path, out_dir: Path) -> FigureReport:
    report = FigureReport()
    name = sample_dir.name
    tensors = {p: sample_dir / f"{p}.bin" for p in ("x", "j", "grad", "mask", "j_t")}
    out_dir.mkdir(parents=True, exist_ok=True)

    def save(panel: str, image: Image.Image) -> None:
        path = out_dir / f"{name}_{panel}.png"
        image.save(path)
        report.written.append(path)

    renderers = {
        "x": modality_image,
        "j": to_rgb,
        "grad": heatmap,
        "mask": mask_image,
        "j_t": to_rgb,
    }
    for panel, render in renderers.items():
        if tensors[panel].exists():
            save(panel, render(read_tensor(tensors[panel])))
        else:
            report.skipped.setdefault(name, []).append(panel)

    detections_file = sample_dir / "detections.json"
    if detections_file.exists() and tensors["j"].exists():
        data = json.loads(detections_file.read_text(encoding="utf-8"))
        image = draw_boxes(to_rgb(read_tensor(tensors["j"])), data.get("labels", []), LABEL_COLOR)
        save("detections", draw_boxes(image, data.get("detections", []), DETECTION_COLOR, with_scores=True))
    else:
        report.skipped.setdefault(name, []).append("detections")
    return report


def render_figures(run_dir, out_dir, samples: Optional[int] = None) -> FigureReport:
    """Per-sample panels for a completed target run; missing tensors are skipped with a warning."""
    tensor_root = Path(run_dir) / "tensors"
    if not tensor_root.exists():
        raise StateError(f"{run_dir} has no logged tensors; train it with figures.samples > 0")
    sample_dirs = sorted(p for p in tensor_root.iterdir() if p.is_dir())
    if samples is not None:
        sample_dirs = sample_dirs[:samples]

    report = FigureReport()
    for sample_dir in sample_dirs:
        part = render_sample(sample_dir, Path(out_dir))
        report.written += part.written
        report.skipped.update(part.skipped)
    if report.skipped:
        logger.warning("skipped panels: %s", "; ".join(
            f"{name}: {', '.join(panels)}" for name, panels in sorted(report.skipped.items())))
    return report


def render_corpus(items, out_dir, count: int = 4) -> List[Path]:
    """J_S panels with the inverted layout drawn in."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for index, item in enumerate(items[:count]):
        image = draw_boxes(to_rgb(item.tensor), [a.to_dict() for a in item.layout], LABEL_COLOR)
        path = out / f"corpus-{index:05d}_j_s.png"
        image.save(path)
        written.append(path)
    return written
