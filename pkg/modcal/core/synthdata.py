"""
Synthetic paired-modality detection benchmark.

Scenes are small canvases of flat-coloured shapes on a low-contrast texture.
Class 0 is a rectangle, class 1 an ellipse, class c >= 2 a rotated regular
polygon with c + 1 corners. Each scene's source image I is paired with a
target-modality tensor X produced by a fixed synthetic sensor.
"""

import functools
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from modcal.core import seeding
from modcal.core.errors import ConfigurationError, InputError, LoadError
from modcal.core.tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
)

MANIFEST_NAME = "manifest.jsonl"
GEN_CONFIG_NAME = "gen_config.cfg"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    """Scene generator parameters."""
    canvas: int = 128
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 16
    max_size: int = 40
    min_area: int = 96
    num_backgrounds: int = 4
    max_attempts: int = 50

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "GenConfig":
        data = config.section("data")
        return cls(canvas=data["canvas"], num_classes=data["num_classes"],
                   min_objects=data["min_objects"], max_objects=data["max_objects"],
                   min_size=data["min_size"], max_size=data["max_size"],
                   min_area=data["min_area"], num_backgrounds=data["num_backgrounds"])

    def validate(self) -> None:
        if self.canvas <= 0:
            raise ConfigurationError("canvas must be positive")
        if self.num_classes <= 0:
            raise ConfigurationError("num_classes must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size <= self.canvas:
            raise ConfigurationError("need 2 <= min_size <= max_size <= canvas")
        if self.num_backgrounds <= 0:
            raise ConfigurationError("num_backgrounds must be positive")


@dataclass(frozen=True)
class BoxAnnotation:
    """One element of Y: a class id and an (x_min, y_min, x_max, y_max) box in pixels."""
    class_id: int
    box: Box

    def to_dict(self) -> Dict[str, Any]:
        return {"class_id": self.class_id, "box": list(self.box)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BoxAnnotation":
        return cls(int(data["class_id"]), tuple(float(v) for v in data["box"]))


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    box: Box
    rotation: float
    scale: Tuple[int, int]
    color: Tuple[int, int, int]

    @property
    def annotation(self) -> BoxAnnotation:
        return BoxAnnotation(self.class_id, self.box)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: Tuple[int, int]
    objects: Tuple[ObjectInstance, ...]
    background_id: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SceneSpec":
        objects = tuple(
            ObjectInstance(int(o["class_id"]), tuple(float(v) for v in o["box"]),
                           float(o["rotation"]), tuple(o["scale"]), tuple(o["color"]))
            for o in data["objects"])
        return cls(int(data["seed"]), tuple(data["canvas"]), objects, int(data["background_id"]))


@dataclass(frozen=True)
class SensorConfig:
    """Fixed synthetic sensor turning I into X."""
    mode: str = "spatial-degraded"
    seed: int = 1234
    canvas: int = 128
    downsample: int = 2
    blur_sigma: float = 1.0
    noise_std: float = 0.02
    channels: int = 1
    projection_source: int = 32
    projection_dim: int = 1024

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "SensorConfig":
        sensor = config.section("sensor")
        return cls(mode=sensor["mode"], seed=sensor["seed"], canvas=config["data.canvas"],
                   downsample=sensor["downsample"], blur_sigma=sensor["blur_sigma"],
                   noise_std=sensor["noise_std"], channels=sensor["channels"],
                   projection_source=sensor["projection_source"],
                   projection_dim=sensor["projection_dim"])

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        """Channel-first (c_T, h_T, w_T)."""
        if self.mode == "identity":
            return (3, self.canvas, self.canvas)
        if self.mode == "spatial-degraded":
            side = self.canvas // self.downsample
            return (self.channels, side, side)
        if self.mode == "scrambled-projection":
            return (self.projection_dim, 1, 1)
        raise ConfigurationError(f"Unknown sensor mode: {self.mode}")

    @property
    def is_spatial(self) -> bool:
        return self.mode != "scrambled-projection"


@dataclass
class Sample:
    """A ModalityPair plus its annotations."""
    sample_id: str
    scene: SceneSpec
    source: torch.Tensor
    target: torch.Tensor
    annotations: List[BoxAnnotation] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    count: int
    gen_config: Dict[str, Any]
    sensor: Dict[str, Any]
    records: List[Dict[str, Any]]


# ---------------------------------------------------------------- scenes

@functools.lru_cache(maxsize=32)
def background_texture(background_id: int, canvas: int) -> np.ndarray:
    """Low-contrast smooth texture in [0.05, 0.35], shape (H, W, 3)."""
    rng = np.random.default_rng(10_000 + background_id)
    coarse = rng.uniform(0.05, 0.35, size=(4, 4, 3)).astype(np.float32)
    channels = [
        np.asarray(Image.fromarray(coarse[..., c]).resize((canvas, canvas), Image.BILINEAR))
        for c in range(3)
    ]
    return np.clip(np.stack(channels, axis=-1), 0.05, 0.35)


def _shape_mask(class_id: int, x0: int, y0: int, w: int, h: int,
                rotation: float, canvas: int) -> np.ndarray:
    mask = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(mask)
    rect = [x0, y0, x0 + w - 1, y0 + h - 1]
    if class_id == 0:
        draw.rectangle(rect, fill=255)
    elif class_id == 1:
        draw.ellipse(rect, fill=255)
    else:
        corners = class_id + 1
        cx, cy = x0 + (w - 1) / 2.0, y0 + (h - 1) / 2.0
        points = [
            (cx + (w - 1) / 2.0 * math.cos(rotation + 2 * math.pi * k / corners),
             cy + (h - 1) / 2.0 * math.sin(rotation + 2 * math.pi * k / corners))
            for k in range(corners)
        ]
        draw.polygon(points, fill=255)
    return np.asarray(mask) > 0


def _extent(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _intersects(a: Box, b: Box) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def generate_scene(seed: int, gen_config: GenConfig) -> Tuple[SceneSpec, torch.Tensor, List[BoxAnnotation]]:
    """Render one scene; output is a pure function of (seed, gen_config)."""
    gen_config.validate()
    rng = np.random.default_rng(seed)
    canvas = gen_config.canvas
    wanted = int(rng.integers(gen_config.min_objects, gen_config.max_objects + 1))
    background_id = int(rng.integers(gen_config.num_backgrounds))

    image = background_texture(background_id, canvas).copy()
    objects: List[ObjectInstance] = []
    for _ in range(wanted):
        for _attempt in range(gen_config.max_attempts):
            class_id = int(rng.integers(gen_config.num_classes))
            w = int(rng.integers(gen_config.min_size, gen_config.max_size + 1))
            h = int(rng.integers(gen_config.min_size, gen_config.max_size + 1))
            x0 = int(rng.integers(0, canvas - w + 1))
            y0 = int(rng.integers(0, canvas - h + 1))
            rotation = float(rng.uniform(0, 2 * math.pi))
            color = PALETTE[int(rng.integers(len(PALETTE)))]

            mask = _shape_mask(class_id, x0, y0, w, h, rotation, canvas)
            box = _extent(mask)
            if box is None or (box[2] - box[0]) * (box[3] - box[1]) < gen_config.min_area:
                continue
            if any(_intersects(box, other.box) for other in objects):
                continue
            objects.append(ObjectInstance(class_id, box, rotation, (w, h), color))
            image[mask] = np.asarray(color, dtype=np.float32) / 255.0
            break

    if not objects:
        raise ConfigurationError(f"could not place any object for seed {seed}; check size bounds")

    scene = SceneSpec(int(seed), (canvas, canvas), tuple(objects), background_id)
    tensor = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))
    return scene, tensor, [o.annotation for o in objects]


# ---------------------------------------------------------------- sensor

class Sensor:
    """Holds the fixed random parts of a SensorConfig."""

    def __init__(self, config: SensorConfig):
        self.config = config
        gen = seeding.generator(config.seed)
        c, h, w = config.output_shape
        if config.mode == "spatial-degraded":
            mix = torch.rand(config.channels, 3, generator=gen) + 0.1
            self.mix = mix / mix.sum(dim=1, keepdim=True)
            self.noise = torch.randn(c, h, w, generator=gen) * config.noise_std
            radius = max(1, int(math.ceil(3 * config.blur_sigma)))
            taps = torch.arange(-radius, radius + 1, dtype=torch.float32)
            kernel = torch.exp(-taps ** 2 / (2 * config.blur_sigma ** 2))
            self.kernel = kernel / kernel.sum()
        elif config.mode == "scrambled-projection":
            n_in = 3 * config.projection_source ** 2
            self.projection = torch.randn(config.projection_dim, n_in, generator=gen) / math.sqrt(n_in)
            self.noise = torch.randn(c, h, w, generator=gen) * config.noise_std

    def _blur(self, x: torch.Tensor) -> torch.Tensor:
        k = self.kernel.numel()
        pad = k // 2
        x = F.pad(x[None], (pad, pad, pad, pad), mode="replicate")
        channels = x.shape[1]
        horizontal = self.kernel.view(1, 1, 1, k).expand(channels, 1, 1, k)
        vertical = self.kernel.view(1, 1, k, 1).expand(channels, 1, k, 1)
        x = F.conv2d(x, horizontal, groups=channels)
        x = F.conv2d(x, vertical, groups=channels)
        return x[0]

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        config = self.config
        expected = (3, config.canvas, config.canvas)
        if tuple(image.shape) != expected:
            raise InputError(f"source image shape {tuple(image.shape)} does not match sensor input {expected}")
        if config.mode == "identity":
            return image.clone()
        if config.mode == "spatial-degraded":
            x = F.avg_pool2d(image[None], config.downsample)[0]
            x = self._blur(x)
            x = torch.einsum("oc,chw->ohw", self.mix, x)
            return x + self.noise
        pooled = F.adaptive_avg_pool2d(image[None], config.projection_source).reshape(-1)
        return (self.projection @ pooled).view(-1, 1, 1) + self.noise


@functools.lru_cache(maxsize=8)
def _sensor(config: SensorConfig) -> Sensor:
    return Sensor(config)


def render_target_modality(source_image: torch.Tensor, config: SensorConfig) -> torch.Tensor:
    """X as a deterministic function of I and the sensor config."""
    return _sensor(config)(source_image)


# ---------------------------------------------------------------- datasets

def make_sample(split: str, index: int, master_seed: int, gen_config: GenConfig,
                sensor: SensorConfig) -> Sample:
    stream = seeding.STREAM_TRAIN_SCENES if split == "train" else seeding.STREAM_TEST_SCENES
    seed = seeding.derive_seed(master_seed, stream, index)
    scene, image, annotations = generate_scene(seed, gen_config)
    target = render_target_modality(image, sensor)
    return Sample(f"{split}-{index:05d}", scene, image, target, annotations)


def generate_split(split: str, count: int, master_seed: int, gen_config: GenConfig,
                   sensor: SensorConfig, workers: int = 1) -> List[Sample]:
    """Generate a split; parallel over indices, returned in index order."""
    build = functools.partial(make_sample, split, master_seed=master_seed,
                              gen_config=gen_config, sensor=sensor)
    if workers <= 1 or count < 2:
        return [build(i) for i in range(count)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, range(count), chunksize=max(1, count // (4 * workers))))


def write_dataset(samples: Sequence[Sample], path, gen_config: Optional[GenConfig] = None,
                  sensor: Optional[SensorConfig] = None) -> DatasetManifest:
    """Write tensors and a line-oriented manifest. Single writer per directory."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    gen_dict = asdict(gen_config) if gen_config else {}
    sensor_dict = asdict(sensor) if sensor else {}

    records = []
    for sample in samples:
        source_file = f"tensors/{sample.sample_id}_source.bin"
        target_file = f"tensors/{sample.sample_id}_target.bin"
        write_tensor(root / source_file, sample.source)
        write_tensor(root / target_file, sample.target)
        records.append({
            "id": sample.sample_id,
            "scene": sample.scene.to_dict(),
            "annotations": [a.to_dict() for a in sample.annotations],
            "source": source_file,
            "target": target_file,
        })

    header = {"kind": "header", "format": FORMAT_VERSION, "count": len(records),
              "gen_config": gen_dict, "sensor": sensor_dict}
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    if gen_config:
        lines = [f"{key} = {value}" for key, value in sorted(gen_dict.items())]
        (root / GEN_CONFIG_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")

    logger.info("wrote %d samples to %s", len(records), root)
    return DatasetManifest(root, len(records), gen_dict, sensor_dict, records)


def read_manifest(path) -> DatasetManifest:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise LoadError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise LoadError(f"empty manifest in {root}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise LoadError(f"corrupt manifest header: {e}")
    if header.get("kind") != "header":
        raise LoadError("manifest does not start with a header record")

    records = []
    for index, line in enumerate(lines[1:]):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise LoadError(f"corrupt manifest line: {e}", record=index)
        if not {"id", "scene", "annotations", "source", "target"} <= record.keys():
            raise LoadError("manifest record is missing fields", record=index)
        records.append(record)
    if len(records) != header.get("count"):
        raise LoadError(f"header announces {header.get('count')} records, found {len(records)}")
    return DatasetManifest(root, len(records), header.get("gen_config", {}),
                           header.get("sensor", {}), records)


def read_dataset(path) -> List[Sample]:
    """Load every sample; errors name the offending record index."""
    manifest = read_manifest(path)
    samples = []
    for index, record in enumerate(manifest.records):
        tensors = []
        for key in ("source", "target"):
            tensor_path = manifest.root / record[key]
            if not tensor_path.exists():
                raise LoadError(f"missing tensor file {record[key]}", record=index)
            try:
                tensors.append(read_tensor(tensor_path))
            except LoadError as e:
                raise LoadError(f"{record[key]}: {e}", record=index)
        samples.append(Sample(
            record["id"], SceneSpec.from_dict(record["scene"]), tensors[0], tensors[1],
            [BoxAnnotation.from_dict(a) for a in record["annotations"]]))
    return samples


def sensor_from_manifest(manifest: DatasetManifest) -> SensorConfig:
    if not manifest.sensor:
        raise LoadError(f"dataset {manifest.root} records no sensor configuration")
    return SensorConfig(**manifest.sensor)


def dataset_checksum(path) -> str:
    """SHA-256 over the manifest and every tensor file, in manifest order."""
    manifest = read_manifest(path)
    digest = hashlib.sha256((manifest.root / MANIFEST_NAME).read_bytes())
    for record in manifest.records:
        digest.update((manifest.root / record["source"]).read_bytes())
        digest.update((manifest.root / record["target"]).read_bytes())
    return digest.hexdigest()
