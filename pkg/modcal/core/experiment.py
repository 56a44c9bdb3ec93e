"""
Pipeline stages and the ablation experiment.

Every stage reads its prerequisites from the run root, writes into its own
write-once directory and returns a JSON-able report.
"""

import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from tabulate import tabulate

from modcal.config.manager import RunConfig
from modcal.core import seeding
from modcal.core.calibrator import CalibratorConfig, export_codebook
from modcal.core.detector import (
    DetectorConfig, SourceSchedule, infer_all, load_detector, save_detector, train_source,
)
from modcal.core.errors import InputError, StateError
from modcal.core.fsr import FSRConfig, load_reconstructor, save_reconstructor, stack_corpus, train_reconstructor
from modcal.core.inversion import (
    InversionCache, InversionConfig, LayoutConfig, build_inversion_corpus, foreground_concentration,
    is_descending, read_corpus, write_corpus,
)
from modcal.core.mactrain import (
    TargetConfig, TargetInputs, TrainMode, build_supervision, AnnotationLedger, check_prerequisites,
    evaluate_target, load_target, save_target, semantic_targets, train_target,
)
from modcal.core.metrics import MapResult, evaluate_map
from modcal.core.runlog import RunLayout
from modcal.core.synthdata import (
    GenConfig, SensorConfig, dataset_checksum, generate_split, read_dataset, read_manifest,
    sensor_from_manifest, write_dataset,
)
from modcal.core.tensorio import module_checksum

logger = logging.getLogger(__name__)

DETECTOR_FILE = "detector.mckp"
RECONSTRUCTOR_FILE = "reconstructor.mckp"
TARGET_FILE = "target.mckp"
CODEBOOK_FILE = "codebook.bin"
TRANSFER_FILE = "transfer.json"


class Pipeline:
    """The MAC pipeline over one run root and one configuration."""

    def __init__(self, config: RunConfig, run_root):
        self.config = config
        self.layout = RunLayout(run_root)
        self.seed = config["run.seed"]

    # -------------------------------------------------------------- loaders

    def load_split(self, split: str):
        self.layout.require("data")
        return read_dataset(self.layout.data(split))

    def input_shape(self) -> Tuple[int, int, int]:
        self.layout.require("data")
        return sensor_from_manifest(read_manifest(self.layout.data("train"))).output_shape

    def load_source(self):
        return load_detector(self.layout.require("source"))

    def inversion_config(self) -> InversionConfig:
        return InversionConfig.from_run_config(self.config, seed=self.seed)

    # -------------------------------------------------------------- stages

    def gen_data(self, overwrite: bool = False, workers: int = 1,
                 on_progress: Optional[Callable[[str], None]] = None) -> Dict[str, Any]:
        gen_config = GenConfig.from_run_config(self.config)
        sensor = SensorConfig.from_run_config(self.config)
        gen_config.validate()
        run_dir = self.layout.stage("data").create(overwrite)
        run_dir.save_config(self.config)

        report: Dict[str, Any] = {"seed": self.seed}
        for split, count in (("train", self.config["data.num_train"]), ("test", self.config["data.num_test"])):
            if on_progress:
                on_progress(split)
            samples = generate_split(split, count, self.seed, gen_config, sensor, workers)
            write_dataset(samples, self.layout.data(split), gen_config, sensor)
            report[split] = {"count": count, "checksum": dataset_checksum(self.layout.data(split))}
        run_dir.write_report(report)
        run_dir.mark_complete()
        return report

    def train_source(self, overwrite: bool = False) -> Dict[str, Any]:
        train, test = self.load_split("train"), self.load_split("test")
        det_config = DetectorConfig.from_run_config(self.config)
        schedule = SourceSchedule.from_run_config(self.config)
        run_dir = self.layout.stage("source").create(overwrite)
        run_dir.save_config(self.config)

        model = train_source(torch.stack([s.source for s in train]), [s.annotations for s in train],
                             det_config, schedule, self.seed, on_log=run_dir.metrics)
        save_detector(run_dir / DETECTOR_FILE, model)
        result = self.evaluate_source(model, test)
        report = {"seed": self.seed, "checksum": module_checksum(model), "eval": result.to_dict()}
        run_dir.write_report(report)
        run_dir.mark_complete()
        return report

    def invert(self, overwrite: bool = False, on_progress: Optional[Callable[[int], None]] = None) -> Dict[str, Any]:
        detector = self.load_source()
        layout_config = LayoutConfig.from_run_config(self.config)
        inv_config = self.inversion_config()
        layout_config.validate()
        inv_config.validate()
        run_dir = self.layout.stage("inversion").create(overwrite)
        run_dir.save_config(self.config)

        corpus = build_inversion_corpus(detector, self.config["inversion.corpus_size"], self.seed,
                                        layout_config, inv_config, self.config["inversion.batch_size"],
                                        on_progress)
        write_corpus(corpus, run_dir / "corpus")

        ceiling = self.config["inversion.convergence_ceiling"]
        unconverged = [i for i, item in enumerate(corpus) if item.final_loss > ceiling]
        if unconverged:
            logger.warning("%d corpus items ended above loss %.3f: %s", len(unconverged), ceiling,
                           unconverged[:10])
        rising = [i for i, item in enumerate(corpus) if not is_descending(item.losses)]
        if rising:
            logger.warning("%d corpus items have a rising smoothed loss: %s", len(rising), rising[:10])
        ratios = [foreground_concentration(item.tensor, item.layout) for item in corpus]
        ratios = [r for r in ratios if not math.isnan(r)]
        report = {
            "count": len(corpus),
            "mean_initial_loss": statistics.fmean(item.initial_loss for item in corpus),
            "mean_final_loss": statistics.fmean(item.final_loss for item in corpus),
            "unconverged": unconverged,
            "rising": rising,
            "median_concentration": statistics.median(ratios) if ratios else None,
        }
        run_dir.write_report(report)
        run_dir.mark_complete()
        return report

    def pretrain_fsr(self, overwrite: bool = False) -> Dict[str, Any]:
        self.layout.require("inversion")
        corpus = read_corpus(self.layout.stage("inversion") / "corpus")
        cal_config = CalibratorConfig.from_run_config(self.config, self.input_shape())
        fsr_config = FSRConfig.from_run_config(self.config)
        run_dir = self.layout.stage("fsr").create(overwrite)
        run_dir.save_config(self.config)

        state = train_reconstructor(stack_corpus([item.tensor for item in corpus]), cal_config, fsr_config,
                                    self.seed, on_log=run_dir.metrics)
        save_reconstructor(run_dir / RECONSTRUCTOR_FILE, state)
        export_codebook(run_dir / CODEBOOK_FILE, state.model.codebook)
        report = {"heldout_l1": state.heldout_l1, "threshold": fsr_config.threshold,
                  "converged": state.converged, "checksum": module_checksum(state.model),
                  "dead_codes": state.model.codebook.dead_entries()}
        run_dir.write_report(report)
        run_dir.mark_complete()
        return report

    def target_inputs(self, target_config: TargetConfig) -> TargetInputs:
        """Whatever artifacts exist; check_prerequisites decides what is missing."""
        flags = target_config.effective_flags
        inputs = TargetInputs(train=self.load_split("train"), test=self.load_split("test"))
        source_path = self.layout.stage("source") / DETECTOR_FILE
        if source_path.exists():
            inputs.detector = load_detector(source_path)
        fsr_path = self.layout.stage("fsr") / RECONSTRUCTOR_FILE
        if flags.fsr and fsr_path.exists():
            inputs.reconstructor = load_reconstructor(fsr_path)
        if flags.dss:
            inputs.cache = InversionCache(self.layout.cache)
        return inputs

    def train_target(self, name: str, overwrite: bool = False, replicate: int = 0) -> Dict[str, Any]:
        target_config = TargetConfig.from_run_config(self.config)
        target_config.validate()
        inputs = self.target_inputs(target_config)
        check_prerequisites(target_config, inputs)

        seed = self.seed if replicate == 0 else seeding.derive_seed(self.seed, seeding.STREAM_TARGET, 1000 + replicate)
        run_dir = self.layout.target(name).create(overwrite)
        run_dir.save_config(self.config)

        det_config = DetectorConfig.from_run_config(self.config)
        cal_config = CalibratorConfig.from_run_config(self.config, self.input_shape())
        result = train_target(inputs, target_config, det_config, cal_config, self.inversion_config(), seed,
                              on_log=run_dir.metrics, tensor_dir=run_dir / "tensors",
                              figure_samples=self.config["figures.samples"])
        save_target(run_dir / TARGET_FILE, result.model)
        export_codebook(run_dir / CODEBOOK_FILE, result.model.calibrator.codebook)
        if result.transferred:
            manifest = {"source": f"fsr/{RECONSTRUCTOR_FILE}", "tensors": result.transferred}
            (run_dir / TRANSFER_FILE).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        report = dict(result.report, name=name, replicate=replicate, checksum=module_checksum(result.model))
        run_dir.write_report(report)
        run_dir.mark_complete()
        return report

    def warm_cache(self, modes: Sequence[TrainMode]) -> None:
        """Invert J_T for every label source the given modes use, before parallel runs share the cache."""
        detector = self.load_source()
        train = self.load_split("train")
        base = TargetConfig.from_run_config(self.config)
        for mode in dict.fromkeys(modes):
            if mode is TrainMode.NAIVE:
                continue
            cfg = TargetConfig(mode=mode, semi_fraction=base.semi_fraction, pseudo_threshold=base.pseudo_threshold)
            # the ledger here is scratch; each run keeps its own count
            supervision = build_supervision(mode, train, AnnotationLedger(train), detector, cfg, self.seed)
            semantic_targets(TargetInputs(train, detector=detector, cache=InversionCache(self.layout.cache)),
                             supervision, self.inversion_config(), base.pseudo_threshold)

    # -------------------------------------------------------------- evaluation

    def evaluate_source(self, model=None, test=None) -> MapResult:
        """S on the source images of the test split: the upper reference."""
        model = model or self.load_source()
        test = test if test is not None else self.load_split("test")
        predictions = infer_all(model, torch.stack([s.source for s in test]))
        return evaluate_map({s.sample_id: p for s, p in zip(test, predictions)},
                            {s.sample_id: s.annotations for s in test})

    def evaluate_target(self, name: str) -> MapResult:
        path = self.layout.target(name) / TARGET_FILE
        if not path.exists():
            finished = [d.path.name for d in self.layout.targets() if d.is_complete]
            known = f" (finished runs: {', '.join(finished)})" if finished else ""
            raise StateError(f"no target checkpoint for run {name!r}{known}; "
                             f"run 'modcal train-target --name {name}'")
        return evaluate_target(load_target(path), self.load_split("test"))


# ---------------------------------------------------------------- ablation

@dataclass(frozen=True)
class Rung:
    name: str
    slug: str
    overrides: Dict[str, Any] = field(default_factory=dict)

    @property
    def mode(self) -> TrainMode:
        return TrainMode.parse(self.overrides.get("target.mode", TrainMode.SUPERVISED.value))


def _flags(fsr=False, source_init=False, dss=False, sia=False, **extra) -> Dict[str, Any]:
    return {"target.fsr": fsr, "target.source_init": source_init, "target.two_stage": source_init,
            "target.dss": dss, "target.sia": sia, **extra}


def ablation_ladder(alternatives: bool = False, semi_fraction: float = 0.1) -> List[Rung]:
    """Cumulative technique ladder, then the self- and semi-supervised modes with every technique on."""
    full = _flags(True, True, True, True)
    rungs = [
        Rung("Rand. Init. + Standard", "baseline", {"target.mode": "naive"}),
        Rung("+ FSR", "fsr", _flags(fsr=True, **{"target.mode": "mac-supervised"})),
        Rung("+ Source Init. / two-stage", "source-init",
             _flags(fsr=True, source_init=True, **{"target.mode": "mac-supervised"})),
        Rung("+ DSS", "dss", _flags(fsr=True, source_init=True, dss=True, **{"target.mode": "mac-supervised"})),
        Rung("+ SIA (MAC supervised)", "sia", dict(full, **{"target.mode": "mac-supervised"})),
        Rung("MAC self-supervised", "self", dict(full, **{"target.mode": "mac-self"})),
        Rung(f"MAC semi-supervised ({semi_fraction:g})", "semi",
             dict(full, **{"target.mode": "mac-semi", "target.semi_fraction": semi_fraction})),
    ]
    if alternatives:
        ss = Rung("+ SS (no decay)", "ss", _flags(fsr=True, source_init=True, dss=True, **{
            "target.mode": "mac-supervised", "target.dss_decay": 1.0}))
        rungs.insert(4, ss)
    return rungs


def run_name(rung: Rung, replicate: int) -> str:
    return f"ablation-{rung.slug}-r{replicate}"


def _run_rung(values: Mapping[str, Any], run_root: str, name: str, replicate: int, overwrite: bool) -> Dict[str, Any]:
    torch.set_num_threads(1)
    return Pipeline(RunConfig(values), run_root).train_target(name, overwrite=overwrite, replicate=replicate)


@dataclass
class ResultRow:
    strategy: str
    ap50: List[float]
    ap: List[float]
    annotation: float

    @staticmethod
    def _fmt(values: List[float]) -> str:
        mean = statistics.fmean(values) * 100
        std = statistics.stdev(values) * 100 if len(values) > 1 else 0.0
        return f"{mean:.2f} ± {std:.2f}"

    def cells(self) -> List[str]:
        return [self.strategy, self._fmt(self.ap50), self._fmt(self.ap), f"{self.annotation:.1f}",
                str(len(self.ap50))]


class ResultsTable:
    HEADERS = ["Strategy", "Box AP@0.5", "Box AP@[.5:.95]", "Annot. (%)", "Seeds"]

    def __init__(self, rows: Sequence[ResultRow]):
        self.rows = list(rows)

    def to_markdown(self) -> str:
        return tabulate([r.cells() for r in self.rows], headers=self.HEADERS, tablefmt="github")

    def to_dict(self) -> List[Dict[str, Any]]:
        return [{"strategy": r.strategy, "ap50": r.ap50, "ap": r.ap, "annotation_percent": r.annotation}
                for r in self.rows]


def collect_results(layout: RunLayout, rungs: Sequence[Rung], replicates: int) -> ResultsTable:
    """One row per rung from the stored reports of its completed runs."""
    rows = []
    for rung in rungs:
        reports = []
        for replicate in range(replicates):
            run_dir = layout.target(run_name(rung, replicate))
            if run_dir.is_complete:
                reports.append(run_dir.read_report())
        if not reports:
            logger.warning("no completed runs for %s", rung.name)
            continue
        if any("eval" not in r for r in reports):
            raise InputError(f"a report of {rung.name} has no evaluation")
        rows.append(ResultRow(
            rung.name,
            [r["eval"]["ap50"] for r in reports],
            [r["eval"]["ap"] for r in reports],
            statistics.fmean(r["annotation_fraction"] for r in reports) * 100,
        ))
    return ResultsTable(rows)


def run_ablation(config: RunConfig, run_root, replicates: int = 3, alternatives: bool = False,
                 workers: int = 1, overwrite: bool = False,
                 on_done: Optional[Callable[[str], None]] = None) -> ResultsTable:
    """Train every rung for every replicate (in parallel processes) and tabulate."""
    rungs = ablation_ladder(alternatives, config["target.semi_fraction"])
    pipeline = Pipeline(config, run_root)
    pipeline.layout.require("fsr")
    pipeline.warm_cache([r.mode for r in rungs if r.overrides.get("target.dss")])

    jobs = [(dict(config.updated(rung.overrides)), str(run_root), run_name(rung, k), k, overwrite)
            for rung in rungs for k in range(replicates)]
    if workers <= 1:
        for job in jobs:
            _run_rung(*job)
            if on_done:
                on_done(job[2])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_rung, *job): job[2] for job in jobs}
            for future, name in futures.items():
                future.result()
                if on_done:
                    on_done(name)

    table = collect_results(pipeline.layout, rungs, replicates)
    out = pipeline.layout.ablation.path
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.md").write_text(table.to_markdown() + "\n", encoding="utf-8")
    (out / "results.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    return table
