"""
Test target training across modes and technique flags.
"""

from dataclasses import replace

import pytest
import torch

from modcal.core.calibrator import CalibratorConfig
from modcal.core.errors import ConfigurationError, InputError, StateError
from modcal.core.fsr import FSRConfig, train_reconstructor
from modcal.core.inversion import InversionCache, InversionConfig
from modcal.core.mactrain import (
    TargetConfig, TargetInputs, TechniqueFlags, TrainMode, check_prerequisites, learning_rate_factor, load_target,
    predict, pseudo_ground_truth, save_target, semi_split, train_target,
)
from modcal.core.tensorio import module_checksum

CAL = CalibratorConfig(image_size=32, input_shape=(1, 16, 16), channel=4, codebook_size=8, hidden=4,
                       adapter_channels=2)
INV = InversionConfig(steps=1, seed=0)
BASE = TargetConfig(flags=TechniqueFlags.none(), iterations=4, batch_size=4, lr=1e-3, warmup=2, log_interval=1)


def _train(inputs, config, det_config, **kwargs):
    return train_target(inputs, config, det_config, CAL, INV, seed=0, **kwargs)


def test_naive_is_supervised_without_techniques(train_samples, det_config):
    """Test the naive baseline and a flag-free supervised run are the same loop."""
    inputs = TargetInputs(train_samples)
    naive = _train(inputs, replace(BASE, mode=TrainMode.NAIVE, flags=TechniqueFlags()), det_config)
    plain = _train(inputs, replace(BASE, mode=TrainMode.SUPERVISED), det_config)
    assert module_checksum(naive.model) == module_checksum(plain.model)
    assert naive.history == plain.history
    assert naive.report["mode"] == "naive"
    assert naive.report["flags"] == {"fsr": False, "source_init": False, "two_stage": False, "dss": False,
                                     "sia": False}
    assert naive.ledger.count == 8
    assert naive.transferred == []


def test_training_is_deterministic(train_samples, det_config):
    """Test a repeated seed reproduces the model."""
    inputs = TargetInputs(train_samples)
    a = _train(inputs, BASE, det_config)
    b = _train(inputs, BASE, det_config)
    assert module_checksum(a.model) == module_checksum(b.model)
    assert [r["iteration"] for r in a.history] == [0, 1, 2, 3]


def test_self_supervised_reads_no_annotations(train_samples, det_config, detector):
    """Test mac-self never touches manual labels."""
    result = _train(TargetInputs(train_samples, detector=detector), replace(BASE, mode=TrainMode.SELF),
                    det_config)
    assert result.ledger.count == 0
    assert result.report["annotated_samples"] == 0


def test_semi_supervised_reads_a_fraction(train_samples, det_config, detector):
    """Test mac-semi reads round(f * N) annotations."""
    config = replace(BASE, mode=TrainMode.SEMI, semi_fraction=0.25)
    result = _train(TargetInputs(train_samples, detector=detector), config, det_config)
    assert result.ledger.count == 2
    assert result.report["annotation_fraction"] == 0.25


def test_two_stage_freezes_source(train_samples, det_config, detector):
    """Test S is unchanged during stage 1 and updated after it."""
    flags = replace(TechniqueFlags.none(), source_init=True, two_stage=True)
    config = replace(BASE, flags=flags, warmup=0, lr_drop=1.0, stage1_fraction=0.5)
    records = []
    result = _train(TargetInputs(train_samples, detector=detector), config, det_config, on_log=records.append)

    original = module_checksum(detector)
    assert [r["source_checksum"] == original for r in records] == [True, True, False, False]
    assert [r["stage"] for r in records] == [1, 1, 2, 2]
    assert result.report["source_init_match"] is True
    assert result.report["stage1_end"] == 2
    assert module_checksum(detector) == original


def test_full_techniques(tmp_path, train_samples, test_samples, det_config, detector):
    """Test a run with every technique enabled."""
    corpus = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(0)) * 0.1
    reconstructor = train_reconstructor(corpus, CAL, FSRConfig(iterations=2, batch_size=2), seed=0)
    inputs = TargetInputs(train_samples, test_samples, detector, reconstructor, InversionCache(tmp_path / "cache"))
    config = replace(BASE, flags=TechniqueFlags())

    result = _train(inputs, config, det_config, tensor_dir=tmp_path / "tensors", figure_samples=2)

    for t, record in enumerate(result.history):
        assert record["lambda_dss"] == pytest.approx(0.9999 ** t)
        assert "sia_total" in record
        assert record["grad_j"] >= 0
    assert set(result.report["eval"]) >= {"ap50", "ap"}
    assert result.report["overhead"]["calibrator"] > 0
    decoder = [f"decoder.{k}" for k in reconstructor.model.decoder.state_dict()]
    assert result.transferred == sorted(["codebook.weight"] + decoder)
    assert 0 <= result.report["dead_codes"] <= 8
    sample_dir = tmp_path / "tensors" / train_samples[0].sample_id
    assert {p.name for p in sample_dir.iterdir()} == {"x.bin", "j.bin", "grad.bin", "mask.bin", "j_t.bin",
                                                      "detections.json"}


def test_learning_rate_factor():
    """Test warm-up from 0.001 and the single 10x drop."""
    config = TargetConfig(iterations=10, warmup=4, lr_drop=0.6)
    assert learning_rate_factor(0, config) == pytest.approx(0.001)
    assert learning_rate_factor(2, config) == pytest.approx(0.5005)
    assert learning_rate_factor(5, config) == 1.0
    assert learning_rate_factor(6, config) == pytest.approx(0.1)


def test_semi_split():
    """Test the split size, halves rounding up, and determinism."""
    ids = [f"train-{i:05d}" for i in range(8)]
    chosen = semi_split(ids, 0.25, seed=3)
    assert len(chosen) == 2 and chosen <= set(ids)
    assert semi_split(ids, 0.25, seed=3) == chosen
    assert len(semi_split(ids[:2], 0.25, seed=3)) == 1
    assert len(semi_split(ids[:6], 0.25, seed=3)) == 2


def test_pseudo_ground_truth_threshold(detector, train_samples):
    """Test a threshold of 1 keeps no detections."""
    images = torch.stack([s.source for s in train_samples[:2]])
    assert pseudo_ground_truth(detector, images, 1.0) == [[], []]


def test_prerequisites(train_samples, detector):
    """Test missing stages name the command to run."""
    with pytest.raises(StateError, match="train-source"):
        check_prerequisites(TargetConfig(), TargetInputs(train_samples))
    with pytest.raises(StateError, match="pretrain-fsr"):
        check_prerequisites(TargetConfig(), TargetInputs(train_samples, detector=detector))
    with pytest.raises(StateError, match="inversion cache"):
        check_prerequisites(replace(BASE, flags=replace(TechniqueFlags.none(), dss=True)),
                            TargetInputs(train_samples, detector=detector))
    with pytest.raises(InputError):
        check_prerequisites(BASE, TargetInputs([]))


def test_config_errors():
    """Test mode parsing and validation."""
    assert TrainMode.parse("mac-semi") is TrainMode.SEMI
    with pytest.raises(ConfigurationError, match="naive"):
        TrainMode.parse("mac-weak")
    with pytest.raises(ConfigurationError):
        replace(BASE, mode=TrainMode.SEMI, semi_fraction=0.0).validate()
    with pytest.raises(ConfigurationError):
        replace(BASE, stage1_criterion="sometimes").validate()
    with pytest.raises(ConfigurationError):
        replace(BASE, iterations=0).validate()


def test_target_checkpoint(tmp_path, train_samples, det_config):
    """Test save/load reproduces predictions."""
    result = _train(TargetInputs(train_samples), BASE, det_config)
    save_target(tmp_path / "target.mckp", result.model)
    loaded = load_target(tmp_path / "target.mckp")
    x = torch.stack([s.target for s in train_samples[:2]])
    assert module_checksum(loaded) == module_checksum(result.model)
    assert predict(loaded, x, score_threshold=0.0) == predict(result.model, x, score_threshold=0.0)
