"""
Foreground Semantics Reconstruction.

An auxiliary VQ-VAE R(.) = {E_S, D_S} learns to reconstruct the inverted
corpus J_S. Its codebook and decoder then initialize the calibrator, and the
target run updates parameters in two stages (calibrator only, then everything).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from modcal.core import seeding
from modcal.core.calibrator import Calibrator, CalibratorConfig, Codebook, Decoder, Encoder, vq_losses
from modcal.core.detector import BatchSampler
from modcal.core.errors import ConfigurationError, InputError, NumericError
from modcal.core.losses import round_count
from modcal.core.tensorio import load_container, save_container

logger = logging.getLogger(__name__)

CALIBRATOR_GROUPS: FrozenSet[str] = frozenset({"adapter", "encoder", "codebook", "decoder"})
SOURCE_GROUP = "source"


@dataclass(frozen=True)
class FSRConfig:
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    holdout: float = 0.125
    threshold: float = 0.05
    log_interval: int = 100

    @classmethod
    def from_run_config(cls, config: Mapping[str, Any]) -> "FSRConfig":
        return cls(**config.section("fsr"))

    def validate(self) -> None:
        if not 0 <= self.holdout < 1:
            raise ConfigurationError("fsr holdout must be in [0, 1)")
        if self.iterations < 0:
            raise ConfigurationError("fsr iterations must be >= 0")


class Reconstructor(nn.Module):
    """J_S -> J_S through the same latent grid and codebook layout as the calibrator."""

    def __init__(self, config: CalibratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        downsamples = config.latent_stride.bit_length() - 1
        self.encoder = Encoder(3, config.hidden, config.channel, downsamples)
        self.codebook = Codebook(config.codebook_size, config.channel)
        self.decoder = Decoder(config.channel, config.hidden, config.latent_stride)

    def forward(self, j: torch.Tensor):
        latent = self.codebook(self.encoder(j))
        return self.decoder(latent.z_q), latent


@dataclass
class ReconstructorState:
    model: Reconstructor
    log: List[Dict[str, float]] = field(default_factory=list)
    heldout_l1: float = float("nan")
    threshold: float = 0.05

    @property
    def converged(self) -> bool:
        return self.heldout_l1 < self.threshold


@torch.no_grad()
def reconstruct(model: Reconstructor, j: torch.Tensor) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        out, _ = model(j[None] if j.dim() == 3 else j)
    finally:
        model.train(was_training)
    return out[0] if j.dim() == 3 else out


def split_holdout(count: int, fraction: float, seed: int):
    """Seeded (train, held-out) index split; the held-out part is empty for fraction 0."""
    order = torch.randperm(count, generator=seeding.generator(seed)).tolist()
    n_hold = round_count(count, fraction)
    if n_hold >= count:
        n_hold = count - 1
    return sorted(order[n_hold:]), sorted(order[:n_hold])


def train_reconstructor(corpus: torch.Tensor, cal_config: CalibratorConfig, fsr_config: FSRConfig,
                        seed: int, on_log: Optional[Callable[[Dict[str, float]], None]] = None) -> ReconstructorState:
    """Train R(.) on a stacked corpus [N, 3, H, W] of inverted tensors."""
    fsr_config.validate()
    if corpus.dim() != 4 or corpus.shape[0] == 0:
        raise InputError("reconstructor needs a non-empty corpus of [N, 3, H, W] tensors")

    train_idx, held_idx = split_holdout(corpus.shape[0], fsr_config.holdout,
                                        seeding.derive_seed(seed, seeding.STREAM_FSR, 0))
    with seeding.seeded(seeding.derive_seed(seed, seeding.STREAM_FSR, 1)):
        model = Reconstructor(cal_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=fsr_config.lr)
    sampler = BatchSampler(len(train_idx), fsr_config.batch_size,
                           seeding.derive_seed(seed, seeding.STREAM_FSR, 2))
    state = ReconstructorState(model, threshold=fsr_config.threshold)

    model.train()
    for iteration in range(fsr_config.iterations):
        batch = corpus[[train_idx[i] for i in sampler.next()]]
        rec, latent = model(batch)
        raw = model.codebook.lookup(latent.indices)
        losses = vq_losses(latent.z_e, raw, rec, batch, cal_config.beta)
        if not torch.isfinite(losses.total):
            raise NumericError(f"reconstructor diverged (loss {float(losses.total)})", step=iteration)
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        optimizer.step()

        if iteration % fsr_config.log_interval == 0 or iteration == fsr_config.iterations - 1:
            record = {"iteration": iteration, "loss_total": float(losses.total), "loss_rec": float(losses.rec),
                      "loss_codebook": float(losses.codebook), "loss_commit": float(losses.commit),
                      "dead_codes": model.codebook.dead_entries()}
            logger.info("fsr it %d loss %.4f (rec %.4f) dead codes %d", iteration, record["loss_total"],
                        record["loss_rec"], record["dead_codes"])
            state.log.append(record)
            if on_log:
                on_log(record)

    evaluation = corpus[held_idx] if held_idx else corpus[train_idx]
    state.heldout_l1 = float(F.l1_loss(reconstruct(model, evaluation), evaluation))
    if state.converged:
        logger.info("held-out L1 %.4f below threshold %.4f", state.heldout_l1, fsr_config.threshold)
    else:
        logger.warning("held-out L1 %.4f above threshold %.4f", state.heldout_l1, fsr_config.threshold)
    model.eval()
    return state


def transfer_to_calibrator(state: ReconstructorState, calibrator: Calibrator) -> List[str]:
    """Copy R's codebook and decoder into C; returns the copied tensor names.

    The adapter and E_T are left as they are. Usage counters are not copied;
    the target run counts its own code usage.
    """
    source = {"codebook.weight": state.model.codebook.weight.detach()}
    source.update({f"decoder.{k}": v for k, v in state.model.decoder.state_dict().items()})
    target = calibrator.state_dict()

    mismatched = [
        f"{name} {tuple(tensor.shape)} -> {tuple(target[name].shape) if name in target else 'missing'}"
        for name, tensor in source.items()
        if name not in target or target[name].shape != tensor.shape
    ]
    if mismatched:
        raise ConfigurationError("reconstructor and calibrator disagree on: " + "; ".join(mismatched))

    with torch.no_grad():
        for name, tensor in source.items():
            target[name].copy_(tensor)
    calibrator.initialized = True
    logger.debug("transferred %d tensors into the calibrator", len(source))
    return sorted(source)


# ---------------------------------------------------------------- two-stage update

@dataclass(frozen=True)
class StageSchedule:
    stage1: int
    total: int

    def __post_init__(self):
        if not 0 <= self.stage1 <= self.total:
            raise ConfigurationError(f"stage 1 length {self.stage1} outside [0, {self.total}]")

    @classmethod
    def from_fraction(cls, fraction: float, total: int) -> "StageSchedule":
        return cls(round_count(total, fraction), total)


def trainable_set(iteration: int, schedule: StageSchedule) -> FrozenSet[str]:
    """Parameter groups updated at ``iteration``; stage 1 is [0, stage1)."""
    if not 0 <= iteration < schedule.total:
        raise InputError(f"iteration {iteration} outside [0, {schedule.total})")
    if iteration < schedule.stage1:
        return CALIBRATOR_GROUPS
    return CALIBRATOR_GROUPS | {SOURCE_GROUP}


class PlateauDetector:
    """Signals when a smoothed loss stops improving by ``tol`` (relative) for ``patience`` updates."""

    def __init__(self, patience: int, tol: float, smoothing: float = 0.9):
        self.patience = patience
        self.tol = tol
        self.smoothing = smoothing
        self.best = float("inf")
        self.smoothed: Optional[float] = None
        self.stale = 0

    def update(self, loss: float) -> bool:
        self.smoothed = loss if self.smoothed is None else self.smoothing * self.smoothed + (1 - self.smoothing) * loss
        if self.smoothed < self.best * (1 - self.tol):
            self.best = self.smoothed
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# ---------------------------------------------------------------- checkpoints

def save_reconstructor(path, state: ReconstructorState) -> None:
    meta = {"kind": "reconstructor", "config": asdict(state.model.config),
            "heldout_l1": state.heldout_l1, "threshold": state.threshold, "log": state.log}
    save_container(path, meta, state.model.state_dict())


def load_reconstructor(path) -> ReconstructorState:
    meta, tensors = load_container(path)
    if meta.get("kind") != "reconstructor":
        raise ConfigurationError(f"{path} is not a reconstructor checkpoint")
    config = dict(meta["config"])
    config["input_shape"] = tuple(config["input_shape"])
    model = Reconstructor(CalibratorConfig(**config))
    model.load_state_dict(tensors)
    model.eval()
    return ReconstructorState(model, meta.get("log", []), meta.get("heldout_l1", float("nan")),
                              meta.get("threshold", 0.05))


def stack_corpus(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    if not tensors:
        raise InputError("inversion corpus is empty")
    return torch.stack(list(tensors))
