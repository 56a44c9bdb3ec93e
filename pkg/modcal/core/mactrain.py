"""
Target model training T(.) = {C | S}.

One loop covers the naive baseline and the three MAC supervision modes. The
techniques (FSR initialization, source initialization with a two-stage update,
decayed semantic supervision, skipped inverted attention) are independent
flags; the naive baseline is the loop with every flag off.
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from modcal.core import seeding
from modcal.core.calibrator import Calibrator, CalibratorConfig, build_calibrator
from modcal.core.detector import (
    BatchSampler, DetectorConfig, Detections, SourceDetector, build_detector, detections_from_raw,
    infer_all, source_loss,
)
from modcal.core.errors import ConfigurationError, InputError, NumericError, StateError
from modcal.core.fsr import (
    SOURCE_GROUP, PlateauDetector, ReconstructorState, StageSchedule, trainable_set, transfer_to_calibrator,
)
from modcal.core.inversion import InversionCache, InversionConfig
from modcal.core.losses import DecaySchedule, SIAConfig, dss_loss, round_count, sia_loss, sia_mask, tap_gradient
from modcal.core.metrics import MapResult, evaluate_map
from modcal.core.synthdata import BoxAnnotation, Sample
from modcal.core.tensorio import load_container, module_checksum, save_container, write_tensor

logger = logging.getLogger(__name__)

WARMUP_START = 0.001
LR_DROP_FACTOR = 0.1


class TrainMode(str, Enum):
    NAIVE = "naive"
    SUPERVISED = "mac-supervised"
    SELF = "mac-self"
    SEMI = "mac-semi"

    @classmethod
    def parse(cls, value: str) -> "TrainMode":
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown training mode {value!r}; "
                                     f"expected one of {', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class TechniqueFlags:
    fsr: bool = True
    source_init: bool = True
    two_stage: bool = True
    dss: bool = True
    sia: bool = True

    @classmethod
    def none(cls) -> "TechniqueFlags":
        return cls(False, False, False, False, False)

    def enabled(self) -> List[str]:
        return [name for name, on in asdict(self).items() if on]


@dataclass(frozen=True)
class TargetConfig:
    mode: TrainMode = TrainMode.SUPERVISED
    flags: TechniqueFlags = field(default_factory=TechniqueFlags)
    semi_fraction: float = 0.1
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup: int = 100
    lr_drop: float = 0.6
    stage1_fraction: float = 0.3
    stage1_criterion: str = "fixed"
    plateau_patience: int = 5
    plateau_tol: float = 1e-3
    freeze_codebook: bool = False
    dss_decay: float = 0.9999
    sia: SIAConfig = field(default_factory=SIAConfig)
    pseudo_threshold: float = 0.5
    log_interval: int = 20

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "TargetConfig":
        t = config.section("target")
        mode = TrainMode.parse(t["mode"])
        flags = TechniqueFlags(t["fsr"], t["source_init"], t["two_stage"], t["dss"], t["sia"])
        sia = SIAConfig(fraction=t["sia_fraction"], weight=t["sia_weight"], every=t["sia_every"],
                        supplement=t["sia_supplement"])
        return cls(mode=mode, flags=flags, semi_fraction=t["semi_fraction"], iterations=t["iterations"],
                   batch_size=t["batch_size"], lr=t["lr"], weight_decay=t["weight_decay"],
                   warmup=t["warmup"], lr_drop=t["lr_drop"], stage1_fraction=t["stage1_fraction"],
                   stage1_criterion=t["stage1_criterion"], plateau_patience=t["plateau_patience"],
                   plateau_tol=t["plateau_tol"], freeze_codebook=t["freeze_codebook"],
                   dss_decay=t["dss_decay"], sia=sia, pseudo_threshold=t["pseudo_threshold"],
                   log_interval=t["log_interval"])

    @property
    def effective_flags(self) -> TechniqueFlags:
        return TechniqueFlags.none() if self.mode is TrainMode.NAIVE else self.flags

    def validate(self) -> None:
        if self.mode is TrainMode.SEMI and not 0 < self.semi_fraction < 1:
            raise ConfigurationError(f"semi fraction must be in (0, 1), got {self.semi_fraction}")
        if self.iterations < 1:
            raise ConfigurationError("target training needs at least one iteration")
        if self.stage1_criterion not in ("fixed", "plateau"):
            raise ConfigurationError(f"unknown stage-1 criterion {self.stage1_criterion!r}")
        if not 0 <= self.stage1_fraction <= 1:
            raise ConfigurationError("stage1_fraction must be in [0, 1]")
        DecaySchedule(self.dss_decay)
        self.sia.validate()


# ---------------------------------------------------------------- supervision

class AnnotationLedger:
    """Gatekeeper for manual annotations; counts the distinct samples read."""

    def __init__(self, samples: Sequence[Sample]):
        self._annotations = {s.sample_id: s.annotations for s in samples}
        self.accessed: Set[str] = set()

    def read(self, sample_id: str) -> List[BoxAnnotation]:
        if sample_id not in self._annotations:
            raise InputError(f"no annotations for sample {sample_id}")
        self.accessed.add(sample_id)
        return list(self._annotations[sample_id])

    @property
    def count(self) -> int:
        return len(self.accessed)


def pseudo_ground_truth(detector: SourceDetector, source_images: torch.Tensor,
                        threshold: float) -> List[List[BoxAnnotation]]:
    """Detections of the source model scoring above ``threshold``, as annotations."""
    detections = infer_all(detector, source_images, score_threshold=threshold)
    return [[BoxAnnotation(d.class_id, d.box) for d in dets] for dets in detections]


def semi_split(sample_ids: Sequence[str], fraction: float, seed: int) -> Set[str]:
    """The round(f * N) samples whose manual annotations a semi-supervised run may read."""
    count = round_count(len(sample_ids), fraction)
    order = torch.randperm(len(sample_ids), generator=seeding.generator(seed)).tolist()
    return {sample_ids[i] for i in order[:count]}


@dataclass
class Supervision:
    labels: List[List[BoxAnnotation]]
    sources: List[str]  # "gt" or "pseudo" per sample


def build_supervision(mode: TrainMode, train: Sequence[Sample], ledger: AnnotationLedger,
                      detector: Optional[SourceDetector], config: TargetConfig, seed: int) -> Supervision:
    ids = [s.sample_id for s in train]
    if mode in (TrainMode.NAIVE, TrainMode.SUPERVISED):
        return Supervision([ledger.read(i) for i in ids], ["gt"] * len(ids))

    pseudo = pseudo_ground_truth(detector, torch.stack([s.source for s in train]), config.pseudo_threshold)
    if mode is TrainMode.SELF:
        return Supervision(pseudo, ["pseudo"] * len(ids))

    manual = semi_split(ids, config.semi_fraction, seeding.derive_seed(seed, seeding.STREAM_SEMI_SPLIT))
    labels, sources = [], []
    for sample_id, fallback in zip(ids, pseudo):
        if sample_id in manual:
            labels.append(ledger.read(sample_id))
            sources.append("gt")
        else:
            labels.append(fallback)
            sources.append("pseudo")
    return Supervision(labels, sources)


# ---------------------------------------------------------------- model

class TargetModel(nn.Module):
    """C(.) in front of S(.)."""

    def __init__(self, calibrator: Calibrator, source: SourceDetector):
        super().__init__()
        self.calibrator = calibrator
        self.source = source

    def forward(self, x: torch.Tensor):
        j, latent = self.calibrator(x)
        return j, latent, self.source(j)

    def groups(self) -> Dict[str, List[nn.Parameter]]:
        groups = self.calibrator.parameter_groups()
        groups[SOURCE_GROUP] = list(self.source.parameters())
        return groups

    def parameter_counts(self) -> Dict[str, int]:
        return {"calibrator": sum(p.numel() for p in self.calibrator.parameters()),
                "source": sum(p.numel() for p in self.source.parameters())}


@torch.no_grad()
def predict(model: TargetModel, x: torch.Tensor, score_threshold: Optional[float] = None,
            batch_size: int = 64) -> List[Detections]:
    was_training = model.training
    model.eval()
    try:
        results: List[Detections] = []
        for start in range(0, x.shape[0], batch_size):
            _, _, raw = model(x[start:start + batch_size])
            results.extend(detections_from_raw(raw, model.source.config, score_threshold))
    finally:
        model.train(was_training)
    return results


def evaluate_target(model: TargetModel, test: Sequence[Sample]) -> MapResult:
    predictions = predict(model, torch.stack([s.target for s in test]))
    return evaluate_map({s.sample_id: p for s, p in zip(test, predictions)},
                        {s.sample_id: s.annotations for s in test})


def learning_rate_factor(iteration: int, config: TargetConfig) -> float:
    """Linear warm-up from 0.001, then one 10x drop at lr_drop of the run."""
    factor = 1.0
    if iteration < config.warmup:
        factor = WARMUP_START + (1.0 - WARMUP_START) * iteration / config.warmup
    if iteration >= int(config.lr_drop * config.iterations):
        factor *= LR_DROP_FACTOR
    return factor


def _set_trainable(model: TargetModel, groups: Set[str], freeze_codebook: bool) -> None:
    for name, params in model.groups().items():
        on = name in groups and not (freeze_codebook and name == "codebook")
        for p in params:
            p.requires_grad_(on)


# ---------------------------------------------------------------- training

@dataclass
class TargetInputs:
    train: Sequence[Sample]
    test: Sequence[Sample] = ()
    detector: Optional[SourceDetector] = None
    reconstructor: Optional[ReconstructorState] = None
    cache: Optional[InversionCache] = None


@dataclass
class TargetResult:
    model: TargetModel
    history: List[Dict[str, float]]
    report: Dict[str, Any]
    ledger: AnnotationLedger
    transferred: List[str] = field(default_factory=list)


def check_prerequisites(config: TargetConfig, inputs: TargetInputs) -> None:
    flags = config.effective_flags
    needs_source = flags.source_init or flags.dss or config.mode in (TrainMode.SELF, TrainMode.SEMI)
    if needs_source and inputs.detector is None:
        raise StateError("missing source stage: no source detector checkpoint; run 'modcal train-source' first")
    if flags.fsr and inputs.reconstructor is None:
        raise StateError("missing fsr stage: no reconstructor checkpoint; run 'modcal pretrain-fsr' first")
    if flags.dss and inputs.cache is None:
        raise StateError("missing inversion cache for decayed semantic supervision")
    if not inputs.train:
        raise InputError("no training samples")


def build_target_model(config: TargetConfig, inputs: TargetInputs, det_config: DetectorConfig,
                       cal_config: CalibratorConfig, seed: int) -> Tuple[TargetModel, List[str]]:
    """{C | S} with the configured initialization, plus the tensor names copied from R."""
    flags = config.effective_flags
    calibrator = build_calibrator(cal_config, seeding.derive_seed(seed, seeding.STREAM_TARGET, 0))
    transferred: List[str] = []
    if flags.fsr:
        transferred = transfer_to_calibrator(inputs.reconstructor, calibrator)
    if flags.source_init:
        source = copy.deepcopy(inputs.detector)
    else:
        source = build_detector(det_config, seeding.derive_seed(seed, seeding.STREAM_TARGET, 1))
    return TargetModel(calibrator, source), transferred


def semantic_targets(inputs: TargetInputs, supervision: Supervision, inv_config: InversionConfig,
                     pseudo_threshold: float) -> torch.Tensor:
    """J_T for every training sample, inverted once and cached on disk.

    Init seeds derive from inv_config.seed, so replicates share the cache.
    """
    checksum = module_checksum(inputs.detector)
    ids = [s.sample_id for s in inputs.train]
    tensors: Dict[str, torch.Tensor] = {}
    for tag in ("gt", "pseudo"):
        chosen = [i for i, src in enumerate(supervision.sources) if src == tag]
        if not chosen:
            continue
        label_tag = tag if tag == "gt" else f"pseudo-{pseudo_threshold:g}"
        tensors.update(inputs.cache.fill(inputs.detector, checksum, label_tag, [ids[i] for i in chosen],
                                         [supervision.labels[i] for i in chosen], inv_config.seed, inv_config))
    return torch.stack([tensors[i] for i in ids])


def train_target(inputs: TargetInputs, config: TargetConfig, det_config: DetectorConfig,
                 cal_config: CalibratorConfig, inv_config: InversionConfig, seed: int,
                 on_log: Optional[Callable[[Dict[str, Any]], None]] = None,
                 tensor_dir: Optional[Path] = None, figure_samples: int = 0) -> TargetResult:
    config.validate()
    check_prerequisites(config, inputs)
    flags = config.effective_flags
    ledger = AnnotationLedger(inputs.train)
    supervision = build_supervision(config.mode, inputs.train, ledger, inputs.detector, config, seed)
    j_targets = semantic_targets(inputs, supervision, inv_config, config.pseudo_threshold) if flags.dss else None

    model, transferred = build_target_model(config, inputs, det_config, cal_config, seed)
    source_init_match = (module_checksum(model.source) == module_checksum(inputs.detector)
                         if flags.source_init else None)
    model.train()

    x_all = torch.stack([s.target for s in inputs.train])
    decay = DecaySchedule(config.dss_decay)
    stage1_end = StageSchedule.from_fraction(config.stage1_fraction, config.iterations).stage1 if flags.two_stage else 0
    plateau = PlateauDetector(config.plateau_patience, config.plateau_tol) \
        if flags.two_stage and config.stage1_criterion == "plateau" else None

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda it: learning_rate_factor(it, config))
    sampler = BatchSampler(len(inputs.train), config.batch_size,
                           seeding.derive_seed(seed, seeding.STREAM_TARGET, 2))

    history: List[Dict[str, float]] = []
    active_groups: Optional[Set[str]] = None
    start = time.perf_counter()
    for iteration in range(config.iterations):
        groups = set(trainable_set(iteration, StageSchedule(min(stage1_end, config.iterations), config.iterations)))
        if groups != active_groups:
            _set_trainable(model, groups, config.freeze_codebook)
            if active_groups is not None:
                logger.info("iteration %d: stage 2, updating %s", iteration, ", ".join(sorted(groups)))
            active_groups = groups

        batch = sampler.next()
        x = x_all[batch]
        labels = [supervision.labels[i] for i in batch]
        record = _step(model, x, labels, j_targets[batch] if j_targets is not None else None,
                       iteration, flags, config, decay)
        if not all(math.isfinite(v) for v in record.values()):
            raise NumericError(f"target training diverged (loss {record['loss_total']})", step=iteration)

        optimizer.step()
        record["lr"] = optimizer.param_groups[0]["lr"]
        record["stage"] = 1 if SOURCE_GROUP not in groups else 2
        scheduler.step()
        record["iteration"] = iteration
        history.append(record)

        if iteration % config.log_interval == 0 or iteration == config.iterations - 1:
            logged = dict(record, source_checksum=module_checksum(model.source),
                          dead_codes=model.calibrator.codebook.dead_entries())
            logger.info("target it %d loss %.4f (source %.4f) |dL/dJ| %.3e lambda %.4f", iteration,
                        record["loss_total"], record["source_total"], record["grad_j"],
                        record.get("lambda_dss", 0.0))
            if on_log:
                on_log(logged)
            if plateau is not None and iteration < stage1_end and plateau.update(record["loss_total"]):
                logger.info("stage 1 loss plateaued at iteration %d", iteration)
                stage1_end = iteration + 1

    elapsed = time.perf_counter() - start
    model.eval()

    report: Dict[str, Any] = {
        "mode": config.mode.value,
        "flags": asdict(flags),
        "seed": seed,
        "iterations": config.iterations,
        "stage1_end": stage1_end,
        "annotated_samples": ledger.count,
        "annotation_fraction": ledger.count / len(inputs.train),
        "source_init_match": source_init_match,
        "final_loss": history[-1]["loss_total"],
        "dead_codes": model.calibrator.codebook.dead_entries(),
        "overhead": {"seconds_per_iteration": elapsed / config.iterations, **model.parameter_counts()},
    }
    if inputs.test:
        result = evaluate_target(model, inputs.test)
        report["eval"] = result.to_dict()
        logger.info("AP50 %.4f AP %.4f", result.ap50, result.ap)

    if tensor_dir is not None and figure_samples > 0:
        log_figure_tensors(model, inputs.train[:figure_samples], supervision.labels[:figure_samples],
                           j_targets[:figure_samples] if j_targets is not None else None,
                           config.sia, Path(tensor_dir))
    return TargetResult(model, history, report, ledger, transferred)


def _step(model: TargetModel, x: torch.Tensor, labels: Sequence[Sequence[BoxAnnotation]],
          j_t: Optional[torch.Tensor], iteration: int, flags: TechniqueFlags, config: TargetConfig,
          decay: DecaySchedule) -> Dict[str, float]:
    """Forward and backward of one iteration; returns the logged components."""
    detector = model.source
    j, latent = model.calibrator(x)
    j.retain_grad()
    raw_codes = model.calibrator.codebook.lookup(latent.indices)
    vq = F.mse_loss(raw_codes, latent.z_e.detach()) + model.calibrator.config.beta * F.mse_loss(
        latent.z_e, raw_codes.detach())

    use_sia = flags.sia and iteration % config.sia.every == 0
    if use_sia:
        tap_grad, source = tap_gradient(detector, j, labels, config.sia.tap_layer)
    else:
        source = source_loss(detector(j), labels, detector.config)
    record = {f"source_{k}": v for k, v in source.as_floats().items()}

    semantic = torch.zeros((), dtype=j.dtype)
    if flags.dss:
        dss = dss_loss(j, j_t, detector, labels, iteration, decay, source=source)
        semantic = dss.weight * (dss.ssim_term + dss.l1_term)
        record.update({"dss_ssim": float(dss.ssim_term), "dss_l1": float(dss.l1_term), "lambda_dss": dss.weight})

    total = semantic + vq
    if use_sia:
        mask = sia_mask(tap_grad, config.sia, size=tuple(j.shape[-2:]))
        masked = sia_loss(detector, j, mask, labels)
        total = total + config.sia.weight * masked.total
        if config.sia.supplement:
            total = total + source.total
        record["sia_total"] = float(masked.total)
    else:
        total = total + source.total

    model.zero_grad(set_to_none=True)
    total.backward()
    record.update({"loss_total": float(total), "loss_vq": float(vq), "grad_j": float(j.grad.abs().mean())})
    return record


def log_figure_tensors(model: TargetModel, samples: Sequence[Sample], labels: Sequence[Sequence[BoxAnnotation]],
                       j_targets: Optional[torch.Tensor], sia: SIAConfig, directory: Path) -> None:
    """X, J, |dL/dJ|, the attention mask, detections and J_T per sample, for render-figures."""
    x = torch.stack([s.target for s in samples])
    model.eval()
    j, _ = model.calibrator(x)
    j = j.detach().requires_grad_(True)
    tap_grad, source = tap_gradient(model.source, j, labels, sia.tap_layer)
    (grad_j,) = torch.autograd.grad(source.total, j)
    mask = sia_mask(tap_grad, sia, size=tuple(j.shape[-2:]))
    detections = predict(model, x)

    for i, sample in enumerate(samples):
        out = directory / sample.sample_id
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "x.bin", sample.target)
        write_tensor(out / "j.bin", j[i].detach())
        write_tensor(out / "grad.bin", grad_j[i].abs().sum(dim=0))
        write_tensor(out / "mask.bin", mask.values[i, 0])
        if j_targets is not None:
            write_tensor(out / "j_t.bin", j_targets[i])
        (out / "detections.json").write_text(json.dumps({
            "detections": [d.to_dict() for d in detections[i]],
            "labels": [a.to_dict() for a in labels[i]],
        }, indent=2), encoding="utf-8")


# ---------------------------------------------------------------- checkpoints

def save_target(path, model: TargetModel) -> None:
    meta = {"kind": "target", "calibrator": asdict(model.calibrator.config),
            "detector": asdict(model.source.config)}
    save_container(path, meta, model.state_dict())


def load_target(path) -> TargetModel:
    meta, tensors = load_container(path)
    if meta.get("kind") != "target":
        raise ConfigurationError(f"{path} is not a target checkpoint")
    cal = dict(meta["calibrator"])
    cal["input_shape"] = tuple(cal["input_shape"])
    model = TargetModel(Calibrator(CalibratorConfig(**cal)), SourceDetector(DetectorConfig(**meta["detector"])))
    model.load_state_dict(tensors)
    model.calibrator.initialized = True
    model.eval()
    return model
