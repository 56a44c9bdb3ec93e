"""
Shared fixtures: a tiny configuration that trains in seconds.
"""

import pytest
import torch

from modcal.config.manager import RunConfig
from modcal.core.detector import DetectorConfig, SourceSchedule, train_source
from modcal.core.synthdata import GenConfig, SensorConfig, generate_split

TINY = {
    "data.canvas": 32,
    "data.min_objects": 1,
    "data.max_objects": 2,
    "data.min_size": 8,
    "data.max_size": 12,
    "data.min_area": 32,
    "data.num_train": 8,
    "data.num_test": 4,
    "sensor.downsample": 2,
    "detector.width": 4,
    "source.iterations": 3,
    "source.batch_size": 4,
    "source.log_interval": 1,
    "calibrator.channel": 4,
    "calibrator.codebook_size": 8,
    "calibrator.hidden": 4,
    "calibrator.adapter_channels": 2,
    "inversion.steps": 2,
    "inversion.corpus_size": 4,
    "inversion.batch_size": 2,
    "layout.max_objects": 2,
    "layout.min_size": 8,
    "layout.max_size": 12,
    "fsr.iterations": 3,
    "fsr.batch_size": 2,
    "target.iterations": 4,
    "target.batch_size": 4,
    "target.warmup": 2,
    "target.log_interval": 1,
    "figures.samples": 2,
}


def tiny_args(**extra):
    """--set arguments for the CLI."""
    values = dict(TINY, **extra)
    args = []
    for key, value in values.items():
        args += ["--set", f"{key}={str(value).lower() if isinstance(value, bool) else value}"]
    return args


@pytest.fixture
def tiny_config():
    return RunConfig(TINY)


@pytest.fixture
def gen_config(tiny_config):
    return GenConfig.from_run_config(tiny_config)


@pytest.fixture
def sensor_config(tiny_config):
    return SensorConfig.from_run_config(tiny_config)


@pytest.fixture
def det_config(tiny_config):
    return DetectorConfig.from_run_config(tiny_config)


@pytest.fixture
def train_samples(gen_config, sensor_config):
    return generate_split("train", 8, 0, gen_config, sensor_config)


@pytest.fixture
def test_samples(gen_config, sensor_config):
    return generate_split("test", 4, 0, gen_config, sensor_config)


@pytest.fixture
def detector(train_samples, det_config):
    """A briefly trained source detector."""
    schedule = SourceSchedule(iterations=3, batch_size=4, lr=1e-3, weight_decay=1e-4, log_interval=1)
    return train_source(torch.stack([s.source for s in train_samples]),
                        [s.annotations for s in train_samples], det_config, schedule, seed=0)
