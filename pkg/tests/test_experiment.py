"""
Test the pipeline stages and the ablation table.
"""

import json

import pytest

from modcal.core.errors import StateError
from modcal.core.experiment import (
    Pipeline, ResultRow, ResultsTable, Rung, ablation_ladder, collect_results, run_ablation, run_name,
)
from modcal.core.mactrain import TrainMode
from modcal.core.runlog import RunLayout
from modcal.core.tensorio import read_tensor


@pytest.fixture
def pipeline(tmp_path, tiny_config):
    """A run root with data, source, inversion and fsr stages finished."""
    pipeline = Pipeline(tiny_config, tmp_path / "runs")
    pipeline.gen_data()
    pipeline.train_source()
    pipeline.invert()
    pipeline.pretrain_fsr()
    return pipeline


def test_stage_reports(pipeline):
    """Test every stage left a completed directory and a report."""
    for stage in ("data", "source", "inversion", "fsr"):
        assert pipeline.layout.stage(stage).is_complete
    assert pipeline.layout.stage("inversion").read_report()["count"] == 4
    assert set(pipeline.layout.stage("source").read_report()["eval"]) >= {"ap50", "ap"}
    assert pipeline.input_shape() == (1, 16, 16)

    fsr = pipeline.layout.stage("fsr")
    assert (fsr / "codebook.bin").exists()
    assert 0 <= fsr.read_report()["dead_codes"] <= 8
    assert all("dead_codes" in record for record in fsr.metrics.read())


def test_stages_are_write_once(pipeline):
    """Test a finished stage needs overwrite."""
    with pytest.raises(StateError, match="--overwrite"):
        pipeline.train_source()
    report = pipeline.train_source(overwrite=True)
    assert report["checksum"] == pipeline.layout.stage("source").read_report()["checksum"]


def test_train_target_and_evaluate(pipeline):
    """Test a MAC run, its evaluation and a replicate seed."""
    report = pipeline.train_target("mac")
    assert report["mode"] == "mac-supervised"
    assert report["annotated_samples"] == 8
    assert report["source_init_match"] is True
    assert pipeline.layout.target("mac").is_complete
    assert len(pipeline.layout.target("mac").metrics.read()) == 4

    run_dir = pipeline.layout.target("mac")
    assert read_tensor(run_dir / "codebook.bin").shape == (8, 4)
    manifest = json.loads((run_dir / "transfer.json").read_text())
    assert manifest["source"] == "fsr/reconstructor.mckp"
    assert "codebook.weight" in manifest["tensors"]
    assert all(name.startswith(("codebook.", "decoder.")) for name in manifest["tensors"])
    assert 0 <= report["dead_codes"] <= 8
    assert all("dead_codes" in record for record in run_dir.metrics.read())

    result = pipeline.evaluate_target("mac")
    assert result.to_dict()["ap50"] == report["eval"]["ap50"]
    with pytest.raises(StateError, match="finished runs: mac"):
        pipeline.evaluate_target("other")

    replicate = pipeline.train_target("mac-r1", replicate=1)
    assert replicate["seed"] != report["seed"]


def test_train_target_repeats(pipeline):
    """Test an identical configuration reproduces the checksum."""
    first = pipeline.train_target("a")
    second = pipeline.train_target("b")
    assert first["checksum"] == second["checksum"]


def test_missing_stage(tmp_path, tiny_config):
    """Test stages refuse to run without their inputs."""
    pipeline = Pipeline(tiny_config, tmp_path / "runs")
    with pytest.raises(StateError, match="gen-data"):
        pipeline.train_source()
    pipeline.gen_data()
    with pytest.raises(StateError, match="train-source"):
        pipeline.invert()


def test_ablation_ladder():
    """Test the rung order and the optional no-decay rung."""
    rungs = ablation_ladder()
    assert [r.slug for r in rungs] == ["baseline", "fsr", "source-init", "dss", "sia", "self", "semi"]
    assert rungs[0].mode is TrainMode.NAIVE
    assert rungs[2].overrides["target.two_stage"] is True
    assert rungs[6].overrides["target.semi_fraction"] == 0.1

    with_alternatives = ablation_ladder(alternatives=True)
    assert len(with_alternatives) == 8
    assert with_alternatives[4].slug == "ss"
    assert with_alternatives[4].overrides["target.dss_decay"] == 1.0
    assert run_name(rungs[1], 2) == "ablation-fsr-r2"


def test_results_table():
    """Test mean ± std formatting and the markdown table."""
    row = ResultRow("+ FSR", [0.5, 0.7], [0.2, 0.2], 100.0)
    assert row.cells() == ["+ FSR", "60.00 ± 14.14", "20.00 ± 0.00", "100.0", "2"]
    markdown = ResultsTable([row]).to_markdown()
    assert "Box AP@0.5" in markdown and "60.00 ± 14.14" in markdown
    assert ResultsTable([row]).to_dict()[0]["annotation_percent"] == 100.0


def test_collect_results(tmp_path):
    """Test rows come from completed reports only."""
    layout = RunLayout(tmp_path)
    rungs = [Rung("A", "a"), Rung("B", "b")]
    for replicate, ap50 in enumerate([0.4, 0.6]):
        run_dir = layout.target(run_name(rungs[0], replicate)).create()
        run_dir.write_report({"eval": {"ap50": ap50, "ap": 0.1}, "annotation_fraction": 1.0})
        run_dir.mark_complete()
    unfinished = layout.target(run_name(rungs[1], 0)).create()
    unfinished.write_report({"eval": {"ap50": 1.0, "ap": 1.0}, "annotation_fraction": 0.0})

    table = collect_results(layout, rungs, replicates=2)
    assert [r.strategy for r in table.rows] == ["A"]
    assert table.rows[0].ap50 == [0.4, 0.6]


def test_run_ablation(pipeline, tiny_config, tmp_path):
    """Test one replicate of every rung produces the table files."""
    done = []
    table = run_ablation(tiny_config, tmp_path / "runs", replicates=1, workers=1, on_done=done.append)
    assert len(table.rows) == 7
    assert len(done) == 7
    assert table.rows[0].annotation == 100.0
    assert table.rows[5].annotation == 0.0
    results = json.loads((tmp_path / "runs" / "ablation" / "results.json").read_text())
    assert [r["strategy"] for r in results] == [r.name for r in ablation_ladder()]
    assert (tmp_path / "runs" / "ablation" / "results.md").exists()
