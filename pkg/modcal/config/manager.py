"""
Configuration management functionality.

A run is configured by one flat ``key = value`` file with dotted namespaces
(``detector.lambda_bbox = 1.0``). Values are parsed with PyYAML and coerced to
the type of the documented default; unknown keys are rejected.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import yaml
from dotenv import load_dotenv

from modcal.core.errors import ConfigurationError

RUN_ROOT_ENV = "MODCAL_RUN_ROOT"


@dataclass(frozen=True)
class Option:
    default: Any
    doc: str


DEFAULTS: Dict[str, Option] = {
    # run
    "run.seed": Option(0, "master seed every other seed is derived from"),
    "run.workers": Option(0, "worker processes (0 = physical cores)"),
    # synthetic data
    "data.canvas": Option(128, "square canvas side in pixels"),
    "data.num_classes": Option(3, "number of object classes K"),
    "data.min_objects": Option(1, "minimum objects per scene"),
    "data.max_objects": Option(5, "maximum objects per scene"),
    "data.min_size": Option(16, "minimum object side in pixels"),
    "data.max_size": Option(40, "maximum object side in pixels"),
    "data.min_area": Option(96, "minimum box area in square pixels"),
    "data.num_backgrounds": Option(4, "number of background textures"),
    "data.num_train": Option(512, "training scenes"),
    "data.num_test": Option(128, "held-out scenes"),
    # sensor
    "sensor.mode": Option("spatial-degraded", "identity | spatial-degraded | scrambled-projection"),
    "sensor.seed": Option(1234, "seed of the fixed sensor mixing/projection"),
    "sensor.downsample": Option(2, "spatial-degraded: downsample factor"),
    "sensor.blur_sigma": Option(1.0, "spatial-degraded: Gaussian blur sigma"),
    "sensor.noise_std": Option(0.02, "fixed-pattern noise amplitude"),
    "sensor.channels": Option(1, "spatial-degraded: output channels"),
    "sensor.projection_source": Option(32, "scrambled-projection: side the image is pooled to"),
    "sensor.projection_dim": Option(1024, "scrambled-projection: output length D"),
    # detector
    "detector.width": Option(16, "base channel width of the backbone"),
    "detector.lambda_bbox": Option(1.0, "box loss weight"),
    "detector.lambda_cls": Option(1.0, "classification loss weight"),
    "detector.lambda_mask": Option(0.0, "mask loss weight (no mask head, must stay 0)"),
    "detector.focal_alpha": Option(0.25, "focal loss alpha"),
    "detector.focal_gamma": Option(2.0, "focal loss gamma"),
    "detector.score_threshold": Option(0.3, "inference score threshold"),
    "detector.nms_iou": Option(0.5, "inference NMS IoU"),
    # source training
    "source.iterations": Option(3000, "source detector iterations"),
    "source.batch_size": Option(16, "source detector batch size"),
    "source.lr": Option(1e-3, "source detector learning rate"),
    "source.weight_decay": Option(1e-4, "source detector weight decay"),
    "source.log_interval": Option(50, "iterations between metric records"),
    # calibrator
    "calibrator.channel": Option(32, "latent channel dimension"),
    "calibrator.codebook_size": Option(64, "number of codebook entries p"),
    "calibrator.beta": Option(0.25, "commitment weight"),
    "calibrator.hidden": Option(32, "hidden channels of encoder/decoder"),
    "calibrator.adapter_channels": Option(8, "channels of the modality adapter output"),
    # inversion
    "inversion.steps": Option(400, "gradient steps per inversion"),
    "inversion.step_size": Option(0.1, "plain gradient descent step size"),
    "inversion.init_sigma": Option(0.1, "std of the Gaussian initialization"),
    "inversion.corpus_size": Option(64, "random layouts inverted for FSR"),
    "inversion.batch_size": Option(32, "images optimized together"),
    "inversion.convergence_ceiling": Option(1.0, "max accepted final loss per corpus item"),
    "layout.min_objects": Option(1, "random layout: minimum objects"),
    "layout.max_objects": Option(5, "random layout: maximum objects"),
    "layout.min_size": Option(16, "random layout: minimum box side"),
    "layout.max_size": Option(40, "random layout: maximum box side"),
    # fsr
    "fsr.iterations": Option(2000, "reconstructor iterations"),
    "fsr.batch_size": Option(16, "reconstructor batch size"),
    "fsr.lr": Option(1e-3, "reconstructor learning rate"),
    "fsr.holdout": Option(0.125, "corpus fraction held out for validation"),
    "fsr.threshold": Option(0.05, "required held-out L1 error per pixel"),
    # target training
    "target.mode": Option("mac-supervised", "naive | mac-supervised | mac-self | mac-semi"),
    "target.semi_fraction": Option(0.1, "mac-semi: fraction of manually annotated samples"),
    "target.iterations": Option(2000, "target model iterations"),
    "target.batch_size": Option(16, "target model batch size"),
    "target.lr": Option(1e-4, "Adam learning rate"),
    "target.weight_decay": Option(1e-4, "Adam weight decay"),
    "target.warmup": Option(100, "linear warm-up iterations"),
    "target.lr_drop": Option(0.6, "fraction of the run after which lr drops 10x"),
    "target.fsr": Option(True, "initialize C from the FSR reconstructor"),
    "target.source_init": Option(True, "initialize S from the source checkpoint"),
    "target.two_stage": Option(True, "freeze S during stage 1"),
    "target.stage1_fraction": Option(0.3, "stage 1 length as a fraction of iterations"),
    "target.stage1_criterion": Option("fixed", "fixed | plateau"),
    "target.plateau_patience": Option(5, "plateau: log intervals without improvement"),
    "target.plateau_tol": Option(1e-3, "plateau: minimum relative improvement"),
    "target.freeze_codebook": Option(False, "keep the transferred codebook fixed"),
    "target.dss": Option(True, "add decayed semantic supervision"),
    "target.dss_decay": Option(0.9999, "per-iteration decay d (1.0 = plain SS)"),
    "target.sia": Option(True, "add skipped inverted attention"),
    "target.sia_fraction": Option(0.1, "fraction p of cells masked"),
    "target.sia_weight": Option(1.0, "weight of the SIA loss"),
    "target.sia_every": Option(1, "apply SIA every n iterations"),
    "target.sia_supplement": Option(True, "add SIA to the unmasked loss (false = replace)"),
    "target.pseudo_threshold": Option(0.5, "score a detection must exceed to become pseudo-GT"),
    "target.log_interval": Option(20, "iterations between metric records"),
    # figures
    "figures.samples": Option(4, "training samples whose tensors are logged for figures"),
}


def parse_value(raw: str) -> Any:
    """Parse a raw string with YAML scalar rules."""
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def coerce(key: str, value: Any) -> Any:
    """Coerce a parsed value to the type of its default."""
    if key not in DEFAULTS:
        raise ConfigurationError(f"Unknown configuration key: {key}")
    default = DEFAULTS[key].default
    if isinstance(value, str) and not isinstance(default, str):
        value = parse_value(value)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"Invalid value for {key}: {value!r} (expected {type(default).__name__})")


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, parse_value(raw))
    return values


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig(Mapping[str, Any]):
    """Validated, complete configuration of a run."""

    def __init__(self, overrides: Optional[Mapping[str, Any]] = None):
        self._values = {key: option.default for key, option in DEFAULTS.items()}
        for key, value in (overrides or {}).items():
            self._values[key] = coerce(key, value)
        errors = validate_values(self._values)
        if errors:
            raise ConfigurationError("; ".join(errors))

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, name: str) -> Dict[str, Any]:
        """Return the keys of one namespace without the prefix."""
        prefix = name + "."
        return {key[len(prefix):]: value for key, value in self._values.items() if key.startswith(prefix)}

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        values = dict(self._values)
        values.update(overrides)
        return RunConfig(values)

    def to_lines(self) -> List[str]:
        return [f"{key} = {format_value(value)}" for key, value in sorted(self._values.items())]

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Configuration file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls(parse_lines(f, source=str(path)))


def validate_values(values: Mapping[str, Any]) -> List[str]:
    """Cross-key validation; returns a list of problems."""
    errors = []
    if values["data.canvas"] <= 0 or values["data.canvas"] % 16:
        errors.append("data.canvas must be a positive multiple of 16")
    if values["data.num_classes"] < 1:
        errors.append("data.num_classes must be >= 1")
    if not 1 <= values["data.min_objects"] <= values["data.max_objects"]:
        errors.append("need 1 <= data.min_objects <= data.max_objects")
    if values["sensor.mode"] not in ("identity", "spatial-degraded", "scrambled-projection"):
        errors.append(f"Unknown sensor.mode: {values['sensor.mode']}")
    if values["detector.lambda_bbox"] < 0 or values["detector.lambda_cls"] < 0:
        errors.append("detector loss weights must be >= 0")
    if values["detector.lambda_mask"] != 0:
        errors.append("detector.lambda_mask must be 0 (no mask head)")
    if values["calibrator.codebook_size"] < 2:
        errors.append("calibrator.codebook_size must be >= 2")
    if values["inversion.steps"] < 0 or values["inversion.step_size"] <= 0:
        errors.append("inversion.steps must be >= 0 and inversion.step_size > 0")
    if values["target.mode"] not in ("naive", "mac-supervised", "mac-self", "mac-semi"):
        errors.append(f"Unknown target.mode: {values['target.mode']}")
    if not 0 < values["target.semi_fraction"] < 1:
        errors.append("target.semi_fraction must be in (0, 1)")
    if not 0 < values["target.dss_decay"] <= 1:
        errors.append("target.dss_decay must be in (0, 1]")
    if not 0 <= values["target.sia_fraction"] <= 1:
        errors.append("target.sia_fraction must be in [0, 1]")
    if not 0 <= values["target.stage1_fraction"] <= 1:
        errors.append("target.stage1_fraction must be in [0, 1]")
    if values["target.stage1_criterion"] not in ("fixed", "plateau"):
        errors.append("target.stage1_criterion must be fixed or plateau")
    return errors


class ConfigManager:
    """Manages the run configuration file and environment defaults."""

    def __init__(self, config_path: Optional[str] = None):
        """Initialize configuration manager."""
        load_dotenv()
        if config_path:
            self.config_path = Path(config_path)
        else:
            self.config_path = Path.cwd() / "modcal.cfg"

    def config_exists(self) -> bool:
        """Check if configuration file exists."""
        return self.config_path.exists()

    def load_values(self) -> Dict[str, Any]:
        """Load the explicitly set values (without defaults)."""
        if not self.config_exists():
            return {}
        with open(self.config_path, "r", encoding="utf-8") as f:
            return parse_lines(f, source=str(self.config_path))

    def load_config(self, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
        """Load configuration from file, then apply overrides."""
        values = self.load_values()
        values.update(overrides or {})
        return RunConfig(values)

    def save_values(self, values: Mapping[str, Any]) -> None:
        """Save explicitly set values, one key per line."""
        lines = [f"{key} = {format_value(values[key])}" for key in sorted(values)]
        self.config_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def get_value(self, key: str) -> Any:
        """Get a configuration value using dot notation."""
        if key not in DEFAULTS:
            raise ConfigurationError(f"Unknown configuration key: {key}")
        return self.load_config()[key]

    def set_value(self, key: str, value: Any) -> Any:
        """Set a configuration value using dot notation."""
        values = self.load_values()
        values[key] = coerce(key, value)
        RunConfig(values)
        self.save_values(values)
        return values[key]

    def create_default_config(self) -> None:
        """Write every key with its default and doc string."""
        lines = []
        for key, option in DEFAULTS.items():
            lines.append(f"# {option.doc}")
            lines.append(f"{key} = {format_value(option.default)}")
        self.config_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def validate_config(self) -> Tuple[bool, List[str]]:
        """Validate configuration and return (is_valid, errors)."""
        try:
            self.load_config()
        except ConfigurationError as e:
            return False, [str(e)]
        return True, []

    @staticmethod
    def run_root(explicit: Optional[str] = None) -> Path:
        """Resolve the run root: flag, then environment, then ./runs."""
        load_dotenv()
        return Path(explicit or os.environ.get(RUN_ROOT_ENV, "runs"))


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Parse ``--set key=value`` pairs."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"Expected key=value, got: {pair}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, parse_value(raw.strip()))
    return values
