"""
Test source model inversion, random layouts and the J_T cache.
"""

import math
from collections import Counter
from dataclasses import replace

import pytest
import torch

from modcal.core import seeding
from modcal.core.errors import ConfigurationError, InputError, LoadError, StateError
from modcal.core.inversion import (
    InversionCache, InversionConfig, LayoutConfig, build_inversion_corpus, foreground_concentration,
    frozen, generate_random_layout, initial_tensor, invert_batch, invert_source, is_descending, read_corpus,
    settings_digest, smoothed_losses, write_corpus,
)
from modcal.core.synthdata import BoxAnnotation
from modcal.core.tensorio import module_checksum

LAYOUT = LayoutConfig(canvas=32, num_classes=3, min_objects=1, max_objects=2, min_size=8, max_size=12)
LAYOUT_A = [BoxAnnotation(0, (4.0, 4.0, 16.0, 14.0))]


def test_zero_steps_returns_initialization(detector):
    """Test steps = 0 leaves the seeded start unchanged."""
    config = InversionConfig(steps=0, seed=11)
    item = invert_source(detector, LAYOUT_A, config)
    assert torch.equal(item.tensor, initial_tensor(11, 32, config.init_sigma))
    assert item.initial_loss == item.final_loss
    assert len(item.losses) == 1


def test_inversion_reduces_loss_and_keeps_detector(detector):
    """Test descent lowers L_S and never touches S."""
    before = module_checksum(detector)
    item = invert_source(detector, LAYOUT_A, InversionConfig(steps=5, step_size=0.1, seed=0))
    assert module_checksum(detector) == before
    assert item.final_loss < item.initial_loss
    assert len(item.losses) == 6
    assert all(p.requires_grad for p in detector.parameters())


def test_smoothed_loss_descends(detector):
    """Test L_S averaged over 10-step windows never rises over a 40-step run."""
    item = invert_source(detector, LAYOUT_A, InversionConfig(steps=40, step_size=0.01, seed=3))
    smooth = smoothed_losses(item.losses, window=10)
    assert len(smooth) == 32
    assert is_descending(item.losses, window=10)
    assert smooth[-1] < smooth[0]


def test_smoothing_helpers():
    """Test the moving average and the descent check on hand-made trajectories."""
    assert smoothed_losses([4.0, 2.0, 0.0], window=2).tolist() == [3.0, 1.0]
    assert smoothed_losses([1.0, 2.0], window=5).tolist() == [1.0, 2.0]
    assert is_descending([5.0, 4.0, 4.5, 3.0, 2.0], window=2)
    assert not is_descending([1.0, 1.0, 3.0, 3.0], window=2)


def test_batch_matches_individual_runs(detector):
    """Test each image in a batch follows its own trajectory."""
    config = InversionConfig(steps=3)
    layouts = [LAYOUT_A, [BoxAnnotation(2, (10.0, 12.0, 30.0, 30.0))]]
    batch = invert_batch(detector, layouts, [1, 2], config)
    single = invert_batch(detector, layouts[1:], [2], config)[0]
    assert torch.allclose(batch[1].tensor, single.tensor, atol=1e-6)


def test_empty_layout_is_rejected(detector):
    """Test inversion needs at least one box."""
    with pytest.raises(InputError):
        invert_source(detector, [], InversionConfig(steps=1))
    with pytest.raises(InputError):
        invert_batch(detector, [LAYOUT_A], [1, 2], InversionConfig(steps=1))


def test_inversion_config_validation():
    """Test negative steps and step sizes."""
    with pytest.raises(ConfigurationError):
        InversionConfig(steps=-1).validate()
    with pytest.raises(ConfigurationError):
        InversionConfig(step_size=0.0).validate()


def test_frozen_restores_flags(detector):
    """Test the freeze context restores requires_grad and mode."""
    detector.train()
    first = next(detector.parameters())
    first.requires_grad_(False)
    with frozen(detector):
        assert not detector.training
        assert not any(p.requires_grad for p in detector.parameters())
    assert detector.training
    assert not first.requires_grad
    first.requires_grad_(True)


def test_random_layout_bounds_and_determinism():
    """Test boxes stay inside the canvas and a seed repeats."""
    for seed in range(200):
        layout = generate_random_layout(seed, LAYOUT)
        assert LAYOUT.min_objects <= len(layout) <= LAYOUT.max_objects
        for ann in layout:
            x0, y0, x1, y1 = ann.box
            assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
            assert LAYOUT.min_size <= x1 - x0 <= LAYOUT.max_size
    assert generate_random_layout(5, LAYOUT) == generate_random_layout(5, LAYOUT)


def test_random_layout_infeasible():
    """Test sizes that do not fit the canvas."""
    with pytest.raises(ConfigurationError):
        generate_random_layout(0, replace(LAYOUT, max_size=64))


def test_random_layout_class_histogram():
    """Test classes are uniform within 3 sigma over 10k layouts."""
    config = replace(LAYOUT, min_objects=1, max_objects=1)
    counts = Counter(generate_random_layout(seed, config)[0].class_id for seed in range(10_000))
    n, p = 10_000, 1 / 3
    sigma = math.sqrt(n * p * (1 - p))
    for class_id in range(3):
        assert abs(counts[class_id] - n * p) <= 3 * sigma


def test_singleton_corpus_equals_direct_inversion(detector):
    """Test n = 1 reproduces invert_source with the same seeds."""
    config = InversionConfig(steps=2)
    corpus = build_inversion_corpus(detector, 1, 9, LAYOUT, config)
    layout = generate_random_layout(seeding.derive_seed(9, seeding.STREAM_LAYOUTS, 0), LAYOUT)
    seed = seeding.derive_seed(9, seeding.STREAM_INVERSION_INIT, 0)
    direct = invert_source(detector, layout, replace(config, seed=seed))
    assert len(corpus) == 1
    assert corpus[0].layout == layout
    assert torch.equal(corpus[0].tensor, direct.tensor)


def test_different_seeds_give_different_tensors(detector):
    """Test distinct initializations with the same layout."""
    a = invert_source(detector, LAYOUT_A, InversionConfig(steps=2, seed=1))
    b = invert_source(detector, LAYOUT_A, InversionConfig(steps=2, seed=2))
    assert float((a.tensor - b.tensor).abs().max()) > 0


def test_corpus_progress_and_size(detector):
    """Test batching covers every layout."""
    done = []
    corpus = build_inversion_corpus(detector, 5, 0, LAYOUT, InversionConfig(steps=1), batch_size=2,
                                    on_progress=done.append)
    assert len(corpus) == 5
    assert done == [2, 4, 5]
    with pytest.raises(ConfigurationError):
        build_inversion_corpus(detector, 0, 0, LAYOUT, InversionConfig(steps=1))


def test_foreground_concentration():
    """Test the inside/outside energy ratio."""
    tensor = torch.full((3, 32, 32), 0.1)
    tensor[:, 4:14, 4:16] = 1.0
    assert foreground_concentration(tensor, LAYOUT_A) == pytest.approx(10.0)
    assert math.isnan(foreground_concentration(tensor, [BoxAnnotation(0, (0.0, 0.0, 32.0, 32.0))]))


def test_corpus_round_trip(tmp_path, detector):
    """Test write_corpus/read_corpus keep tensors and provenance."""
    corpus = build_inversion_corpus(detector, 3, 0, LAYOUT, InversionConfig(steps=1))
    write_corpus(corpus, tmp_path / "corpus")
    loaded = read_corpus(tmp_path / "corpus")
    for original, copy in zip(corpus, loaded):
        assert torch.equal(copy.tensor, original.tensor)
        assert copy.layout == original.layout
        assert copy.seed == original.seed
        assert copy.losses == pytest.approx(original.losses)

    (tmp_path / "corpus" / "items" / "00001.bin").unlink()
    with pytest.raises(LoadError, match="record 1"):
        read_corpus(tmp_path / "corpus")
    with pytest.raises(StateError):
        read_corpus(tmp_path / "elsewhere")


def test_cache_fill_and_reuse(tmp_path, detector):
    """Test J_T entries are inverted once, and unlabeled samples get zeros."""
    cache = InversionCache(tmp_path / "cache")
    checksum = module_checksum(detector)
    config = InversionConfig(steps=1)
    settings = settings_digest(config, 0)
    ids = ["train-00000", "train-00001"]
    labels = [LAYOUT_A, []]

    with pytest.raises(StateError, match="train-00000"):
        cache.require(ids[0], checksum, settings, "gt")

    first = cache.fill(detector, checksum, "gt", ids, labels, master_seed=0, config=config)
    assert torch.equal(first["train-00001"], torch.zeros(3, 32, 32))
    assert cache.get("train-00000", checksum, settings, "gt") is not None
    assert cache.get("train-00000", checksum, settings, "pseudo-0.5") is None

    again = cache.fill(detector, checksum, "gt", ids, labels, master_seed=0, config=config)
    assert torch.equal(again["train-00000"], first["train-00000"])


def test_cache_entries_follow_inversion_settings(tmp_path, detector):
    """Test a new seed or step budget inverts afresh instead of reusing an entry."""
    cache = InversionCache(tmp_path / "cache")
    checksum = module_checksum(detector)
    ids, labels = ["train-00000"], [LAYOUT_A]
    config = InversionConfig(steps=1)

    first = cache.fill(detector, checksum, "gt", ids, labels, master_seed=0, config=config)
    reseeded = cache.fill(detector, checksum, "gt", ids, labels, master_seed=123, config=config)
    longer = cache.fill(detector, checksum, "gt", ids, labels, master_seed=0,
                        config=InversionConfig(steps=5, step_size=0.5))
    assert not torch.equal(reseeded["train-00000"], first["train-00000"])
    assert not torch.equal(longer["train-00000"], first["train-00000"])

    assert settings_digest(config, 0) != settings_digest(config, 123)
    assert settings_digest(config, 0) == settings_digest(replace(config, seed=99), 0)
    assert settings_digest(config, 0) != settings_digest(replace(config, init_sigma=0.2), 0)


def test_cache_entry_independent_of_fill_order(tmp_path, detector):
    """Test a sample's J_T is the same whether it was filled alone or with others."""
    checksum = module_checksum(detector)
    config = InversionConfig(steps=2)
    ids = ["train-00000", "train-00001", "train-00002"]
    labels = [LAYOUT_A, [BoxAnnotation(1, (2.0, 6.0, 14.0, 20.0))], [BoxAnnotation(2, (10.0, 12.0, 30.0, 30.0))]]

    full = InversionCache(tmp_path / "full").fill(detector, checksum, "gt", ids, labels, 0, config)

    subset_first = InversionCache(tmp_path / "subset")
    alone = subset_first.fill(detector, checksum, "gt", ids[2:], labels[2:], 0, config)
    later = subset_first.fill(detector, checksum, "gt", ids, labels, 0, config)

    torch.testing.assert_close(alone["train-00002"], full["train-00002"])
    for sample_id in ids:
        torch.testing.assert_close(later[sample_id], full[sample_id])
