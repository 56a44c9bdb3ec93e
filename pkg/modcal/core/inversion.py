"""
Source Model Inversion: synthesize foreground semantics J by gradient descent
on an input tensor against a frozen detector and a layout Y.
"""

import contextlib
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
import torch

from modcal.core import seeding
from modcal.core.detector import SourceDetector, source_loss
from modcal.core.errors import ConfigurationError, InputError, LoadError, NumericError, StateError
from modcal.core.synthdata import BoxAnnotation
from modcal.core.tensorio import module_checksum, read_tensor, write_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 400
    step_size: float = 0.1
    init_sigma: float = 0.1
    seed: int = 0
    use_bbox: bool = True
    use_cls: bool = True

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any], seed: int = 0) -> "InversionConfig":
        inv = config.section("inversion")
        return cls(steps=inv["steps"], step_size=inv["step_size"], init_sigma=inv["init_sigma"], seed=seed)

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("inversion steps must be >= 0")
        if self.step_size <= 0:
            raise ConfigurationError("inversion step size must be > 0")


@dataclass(frozen=True)
class LayoutConfig:
    canvas: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 16
    max_size: int = 40

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "LayoutConfig":
        layout = config.section("layout")
        return cls(canvas=config["data.canvas"], num_classes=config["data.num_classes"], **layout)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError("layout needs at least one class")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("layout needs 1 <= min_objects <= max_objects")
        if not 1 <= self.min_size <= self.max_size <= self.canvas:
            raise ConfigurationError(
                f"layout sizes [{self.min_size}, {self.max_size}] do not fit a {self.canvas} px canvas")


@dataclass
class ForegroundSemantics:
    """An inverted tensor J [3, H, W] with its provenance."""
    tensor: torch.Tensor
    layout: List[BoxAnnotation]
    seed: int
    initial_loss: float
    final_loss: float
    losses: List[float] = field(default_factory=list)

    def provenance(self) -> Dict[str, Any]:
        return {
            "layout": [a.to_dict() for a in self.layout],
            "seed": self.seed,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "losses": self.losses,
        }


@contextlib.contextmanager
def frozen(module: torch.nn.Module) -> Iterator[torch.nn.Module]:
    """Eval mode and no parameter gradients for the duration of the block."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)
        module.train(was_training)


def initial_tensor(seed: int, size: int, sigma: float) -> torch.Tensor:
    return torch.randn(3, size, size, generator=seeding.generator(seed)) * sigma


def invert_batch(detector: SourceDetector, layouts: Sequence[Sequence[BoxAnnotation]],
                 seeds: Sequence[int], config: InversionConfig) -> List[ForegroundSemantics]:
    """Plain gradient descent on a batch of inputs, each with its own layout and init seed.

    Per-image losses are summed, so each image follows its own trajectory.
    """
    config.validate()
    if len(layouts) != len(seeds):
        raise InputError("one seed per layout is required")
    for layout in layouts:
        if not layout:
            raise InputError("cannot invert an empty layout")

    det_config = replace(detector.config,
                         lambda_bbox=detector.config.lambda_bbox if config.use_bbox else 0.0,
                         lambda_cls=detector.config.lambda_cls if config.use_cls else 0.0)
    size = detector.config.input_size
    x = torch.stack([initial_tensor(s, size, config.init_sigma) for s in seeds]).requires_grad_(True)
    trajectories: List[List[float]] = [[] for _ in seeds]
    checksum = module_checksum(detector)

    with frozen(detector):
        for step in range(config.steps + 1):
            losses = source_loss(detector(x), layouts, det_config, reduction="none").total
            if not torch.isfinite(losses).all():
                raise NumericError("inversion loss became non-finite", step=step)
            for trajectory, value in zip(trajectories, losses.tolist()):
                trajectory.append(value)
            if step == config.steps:
                break
            (grad,) = torch.autograd.grad(losses.sum(), x)
            with torch.no_grad():
                x -= config.step_size * grad

    if module_checksum(detector) != checksum:
        raise StateError("source model parameters changed during inversion")

    result = x.detach()
    return [
        ForegroundSemantics(result[i].clone(), list(layouts[i]), int(seeds[i]),
                            trajectories[i][0], trajectories[i][-1], trajectories[i])
        for i in range(len(seeds))
    ]


def invert_source(detector: SourceDetector, annotations: Sequence[BoxAnnotation],
                  config: InversionConfig) -> ForegroundSemantics:
    """J_S = argmin_J L_S(S(J), Y) from a seeded Gaussian start; S is left untouched."""
    return invert_batch(detector, [annotations], [config.seed], config)[0]


def generate_random_layout(seed: int, layout_config: LayoutConfig) -> List[BoxAnnotation]:
    """Uniformly placed boxes with uniform classes; overlaps are allowed."""
    layout_config.validate()
    rng = np.random.default_rng(seed)
    canvas = layout_config.canvas
    count = int(rng.integers(layout_config.min_objects, layout_config.max_objects + 1))
    layout = []
    for _ in range(count):
        w = int(rng.integers(layout_config.min_size, layout_config.max_size + 1))
        h = int(rng.integers(layout_config.min_size, layout_config.max_size + 1))
        x0 = int(rng.integers(0, canvas - w + 1))
        y0 = int(rng.integers(0, canvas - h + 1))
        class_id = int(rng.integers(layout_config.num_classes))
        layout.append(BoxAnnotation(class_id, (float(x0), float(y0), float(x0 + w), float(y0 + h))))
    return layout


def build_inversion_corpus(detector: SourceDetector, n_layouts: int, master_seed: int,
                           layout_config: LayoutConfig, config: InversionConfig,
                           batch_size: int = 32,
                           on_progress: Optional[Callable[[int], None]] = None) -> List[ForegroundSemantics]:
    """n_layouts independent (Y', J_S) pairs with per-item layout and init seeds."""
    if n_layouts < 1:
        raise ConfigurationError("corpus needs at least one layout")
    layouts = [generate_random_layout(seeding.derive_seed(master_seed, seeding.STREAM_LAYOUTS, i), layout_config)
               for i in range(n_layouts)]
    seeds = [seeding.derive_seed(master_seed, seeding.STREAM_INVERSION_INIT, i) for i in range(n_layouts)]

    corpus: List[ForegroundSemantics] = []
    for start in range(0, n_layouts, batch_size):
        stop = min(n_layouts, start + batch_size)
        try:
            corpus += invert_batch(detector, layouts[start:stop], seeds[start:stop],
                                   replace(config, seed=seeds[start]))
        except NumericError as e:
            raise NumericError(f"corpus items {start}-{stop - 1}: {e}")
        if on_progress:
            on_progress(stop)
        logger.info("inverted %d/%d layouts", stop, n_layouts)
    return corpus


def smoothed_losses(losses: Sequence[float], window: int = 10) -> np.ndarray:
    """Moving average of a loss trajectory over ``window`` steps (valid positions only)."""
    values = np.asarray(losses, dtype=np.float64)
    if window < 1 or values.size < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def is_descending(losses: Sequence[float], window: int = 10, tol: float = 1e-6) -> bool:
    """True if the smoothed trajectory never rises by more than ``tol`` (relative)."""
    smooth = smoothed_losses(losses, window)
    return bool(np.all(np.diff(smooth) <= tol * np.abs(smooth[:-1]).clip(min=1.0)))


def foreground_concentration(tensor: torch.Tensor, boxes: Sequence[BoxAnnotation]) -> float:
    """Mean |J| inside the union of boxes over mean |J| outside it."""
    energy = tensor.abs().mean(dim=0)
    inside = torch.zeros_like(energy, dtype=torch.bool)
    for ann in boxes:
        x0, y0, x1, y1 = (int(round(v)) for v in ann.box)
        inside[y0:y1, x0:x1] = True
    if inside.all() or not inside.any():
        return float("nan")
    outside_mean = float(energy[~inside].mean())
    return float(energy[inside].mean()) / max(outside_mean, 1e-12)


# ---------------------------------------------------------------- persistence

def write_corpus(items: Sequence[ForegroundSemantics], directory) -> None:
    """One tensor blob and one provenance line per item."""
    root = Path(directory)
    (root / "items").mkdir(parents=True, exist_ok=True)
    with open(root / "provenance.jsonl", "w", encoding="utf-8") as f:
        for index, item in enumerate(items):
            write_tensor(root / "items" / f"{index:05d}.bin", item.tensor)
            f.write(json.dumps({"index": index, **item.provenance()}, sort_keys=True) + "\n")


def read_corpus(directory) -> List[ForegroundSemantics]:
    root = Path(directory)
    path = root / "provenance.jsonl"
    if not path.exists():
        raise StateError(f"no inversion corpus in {root}; run 'modcal invert' first")
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for index, line in enumerate(f):
            record = json.loads(line)
            blob = root / "items" / f"{record['index']:05d}.bin"
            if not blob.exists():
                raise LoadError(f"missing corpus tensor {blob.name}", record=index)
            items.append(ForegroundSemantics(
                read_tensor(blob), [BoxAnnotation.from_dict(a) for a in record["layout"]],
                record["seed"], record["initial_loss"], record["final_loss"], record["losses"]))
    return items


def settings_digest(config: InversionConfig, master_seed: int) -> str:
    """Short digest of every inversion setting that shapes a J_T besides S and the labels."""
    fields = asdict(replace(config, seed=int(master_seed)))
    return hashlib.sha256(json.dumps(fields, sort_keys=True).encode("utf-8")).hexdigest()[:12]


class InversionCache:
    """J_T tensors keyed by (source checksum, inversion settings, label source, sample id)."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, sample_id: str, checksum: str, settings: str, tag: str) -> Path:
        return self.root / checksum[:16] / settings / tag / f"{sample_id}.bin"

    def get(self, sample_id: str, checksum: str, settings: str, tag: str) -> Optional[torch.Tensor]:
        path = self._path(sample_id, checksum, settings, tag)
        return read_tensor(path) if path.exists() else None

    def require(self, sample_id: str, checksum: str, settings: str, tag: str) -> torch.Tensor:
        tensor = self.get(sample_id, checksum, settings, tag)
        if tensor is None:
            raise StateError(f"no cached J_T for sample {sample_id} ({tag})")
        return tensor

    def put(self, sample_id: str, checksum: str, settings: str, tag: str, item: ForegroundSemantics) -> None:
        path = self._path(sample_id, checksum, settings, tag)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_tensor(path, item.tensor)
        path.with_suffix(".json").write_text(json.dumps(item.provenance(), sort_keys=True), encoding="utf-8")

    def fill(self, detector: SourceDetector, checksum: str, tag: str, sample_ids: Sequence[str],
             labels: Sequence[Sequence[BoxAnnotation]], master_seed: int, config: InversionConfig,
             batch_size: int = 32) -> Dict[str, torch.Tensor]:
        """Invert every sample not yet cached; samples without labels get a zero J_T.

        Init seeds derive from the sample id, so an entry does not depend on
        which other samples were filled with it.
        """
        settings = settings_digest(config, master_seed)
        pending = [i for i, sid in enumerate(sample_ids)
                   if labels[i] and self.get(sid, checksum, settings, tag) is None]
        for start in range(0, len(pending), batch_size):
            chunk = pending[start:start + batch_size]
            # fixed batch shape across fills
            padded = chunk + [chunk[-1]] * (batch_size - len(chunk))
            seeds = [seeding.derive_named_seed(master_seed, seeding.STREAM_TARGET_SEMANTICS, sample_ids[i])
                     for i in padded]
            items = invert_batch(detector, [labels[i] for i in padded], seeds, config)
            for i, item in zip(chunk, items):
                self.put(sample_ids[i], checksum, settings, tag, item)
            logger.info("cached J_T %d/%d (%s)", min(start + batch_size, len(pending)), len(pending), tag)

        size = detector.config.input_size
        return {
            sid: self.require(sid, checksum, settings, tag) if labels[i] else torch.zeros(3, size, size)
            for i, sid in enumerate(sample_ids)
        }
