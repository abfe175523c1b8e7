"""
Shared machinery for multi-leg experiments.

A leg is one calibrate -> fine-tune -> evaluate run of the quantized model
under a config override and a seed. All legs of an experiment share the FP
model, the feature extractor, the evaluation conditions and the FP images
generated for them, so legs differ only in what the override changes.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import RunConfig, deep_merge, derive_seed, fingerprint_payload, log
from src.diffcore import Condition, NoiseSchedule
from src.evaluation import MetricReport, evaluate_pair, generate_images
from src.latent_dataset import LatentDataset, generate_serial_dataset, make_conditions
from src.metrics import FeatureExtractor, load_feature_extractor
from src.qat_trainer import DistillConfig, PipelineMode, QATConfig, StabilityConfig, train_qat
from src.quant_model import QuantizedModel
from src.stability import gradient_oscillation_index
from src.timecache import TimeCache, precompute_time_cache
from src.toy_data import SyntheticShapes
from src.train_log import OperationTimer, TrainLog

from .quantization_workflow import (
    ArtifactPaths,
    QuantizationWorkflow,
    build_teacher,
    dataset_guidance,
    eval_guidance,
    quantize_model,
    reference_images,
)


# Settings every ablation row starts from; compare-pipelines legs use them too.
BASE_OVERRIDES: Dict[str, Any] = {
    "pipeline": {"mode": "serial"},
    "time_cache": {"enabled": False},
    "quant": {"quantize_time_layers": True, "multi_timestep": False},
    "distill": {"enabled": False},
    "stability": {"enabled": True, "freeze": False},
}


@dataclass
class LegSpec:
    """One experiment leg: a label, a pipeline mode, a nested config override and a seed."""
    label: str
    mode: str
    seed: int
    overrides: Dict[str, Any] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)


@dataclass
class LegResult:
    label: str
    mode: str
    seed: int
    success: bool
    report: Optional[MetricReport] = None
    stats: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    error: Optional[str] = None

    def row(self) -> Dict[str, Any]:
        """Deterministic table row; wall times are kept out."""
        row: Dict[str, Any] = {"label": self.label, "mode": self.mode, "seed": self.seed}
        if self.report is not None:
            row.update({k: v for k, v in self.report.row().items() if k != "label"})
        row.update(self.stats)
        if self.notes:
            row["notes"] = "; ".join(self.notes)
        if not self.success:
            row["error"] = self.error
        return row


class ExperimentContext:
    """
    FP artifacts and cached shared inputs for a set of legs.

    Caches calibration trajectories, serial datasets and FP images so
    legs that need the same input reuse it bit-identically.
    """

    def __init__(
        self,
        run_config: RunConfig,
        paths: ArtifactPaths,
        sched: NoiseSchedule,
        data: SyntheticShapes,
        fp_model,
        fx: FeatureExtractor,
        verbose: bool = False,
    ):
        self.run_config = run_config
        self.paths = paths
        self.sched = sched
        self.data = data
        self.fp_model = fp_model
        self.fx = fx
        self.verbose = verbose
        ev = run_config["eval"]
        self.eval_conditions = make_conditions(int(ev["num_images"]), data.num_classes, int(ev["seed"]))
        self.reference = reference_images(data, int(ev["num_images"]), int(ev["seed"]))
        self._cache: Optional[TimeCache] = None
        self._datasets: Dict[str, Tuple[LatentDataset, float]] = {}
        self._fp_images: Dict[str, torch.Tensor] = {}

    @classmethod
    def from_workflow(cls, workflow: QuantizationWorkflow) -> "ExperimentContext":
        """
        Raises:
            MissingArtifactError: train-fp has not been run in this directory
        """
        fp_model = workflow.load_fp_model()
        fx = load_feature_extractor(workflow.require(workflow.paths.feature_extractor, "train-fp"))
        return cls(
            workflow.run_config, workflow.paths, workflow.sched, workflow.data, fp_model, fx, workflow.verbose
        )

    def time_cache(self) -> TimeCache:
        if self._cache is None:
            self._cache = precompute_time_cache(self.fp_model, self.sched)
        return self._cache

    def dataset(self, num_conditions: int, steps_per_prompt: int, seed: int,
                guidance_scale: Optional[float]) -> Tuple[LatentDataset, float]:
        """Serial dataset and its generation wall time in ms, generated once per policy."""
        key = fingerprint_payload([num_conditions, steps_per_prompt, seed, guidance_scale])
        if key not in self._datasets:
            conditions = make_conditions(num_conditions, self.data.num_classes, seed)
            with OperationTimer() as timer:
                dataset = generate_serial_dataset(
                    self.fp_model,
                    conditions,
                    steps_per_prompt,
                    self.sched,
                    seed=seed,
                    guidance_scale=guidance_scale,
                    batch_size=int(self.run_config["pipeline"]["generation_batch_size"]),
                    verbose=self.verbose,
                )
            self._datasets[key] = (dataset, timer.get_duration())
        return self._datasets[key]

    def fp_images(self, conditions: Sequence[Condition], guidance_scale: Optional[float]) -> torch.Tensor:
        key = fingerprint_payload([[c.class_id, c.seed] for c in conditions] + [guidance_scale])
        if key not in self._fp_images:
            self._fp_images[key] = generate_images(
                self.fp_model, conditions, self.sched, guidance_scale,
                int(self.run_config["eval"]["batch_size"]), self.verbose,
            )
        return self._fp_images[key]

    def evaluate(self, q_model: QuantizedModel, leg_config: RunConfig, label: str,
                 conditions: Optional[Sequence[Condition]] = None) -> MetricReport:
        ev = leg_config["eval"]
        conditions = list(conditions) if conditions is not None else self.eval_conditions
        guidance = eval_guidance(leg_config)
        reference = self.reference if conditions is self.eval_conditions else None
        return evaluate_pair(
            q_model,
            self.fp_model,
            conditions,
            self.sched,
            self.fx,
            guidance_scale=guidance,
            batch_size=int(ev["batch_size"]),
            shrinkage=float(ev["shrinkage"]),
            pfd_layers=ev["pfd_layers"],
            reference_images=reference,
            fp_images=self.fp_images(conditions, guidance),
            label=label,
        )


def leg_config(ctx: ExperimentContext, spec: LegSpec) -> RunConfig:
    overrides = deep_merge(spec.overrides, {"pipeline": {"mode": spec.mode}, "run": {"seed": spec.seed}})
    return ctx.run_config.with_overrides(overrides)


def _mean_or_none(values: Dict[str, float]) -> Optional[float]:
    return float(np.mean(list(values.values()))) if values else None


def training_statistics(train_log: TrainLog, grad_window: int, fluctuation_window: int = 20) -> Dict[str, Any]:
    """Oscillation, gradient sign-change and loss fluctuation figures of one finished leg."""
    summary = train_log.summary
    stats: Dict[str, Any] = {
        "osc_pct": summary.get("oscillation_pct"),
        "frozen": summary.get("frozen_weights", 0),
        "final_loss": summary.get("final_loss"),
        "grad_osc_index": None,
        "loss_fluctuation": None,
    }
    grad_stats = getattr(train_log, "grad_stats", None)
    if grad_stats is not None:
        window = min(grad_window, len(grad_stats))
        if window >= 2:
            stats["grad_osc_index"] = _mean_or_none(gradient_oscillation_index(grad_stats, window))
    window = min(fluctuation_window, len(train_log))
    if window >= 2:
        stats["loss_fluctuation"] = train_log.loss_fluctuation(window)
    return stats


def run_leg(
    ctx: ExperimentContext,
    spec: LegSpec,
    dataset: Optional[LatentDataset] = None,
    callback: Optional[Callable[[int, QuantizedModel, TrainLog], None]] = None,
    log_dir: Optional[Path] = None,
) -> LegResult:
    """
    Calibrate, fine-tune and evaluate one leg.

    Failures are captured in the result so an experiment table can still be
    emitted with the failing row annotated.

    Args:
        dataset: Latents to train on instead of the leg's configured serial dataset
        callback: Forwarded to train_qat
        log_dir: Directory for the leg's JSONL training log
    """
    mode = PipelineMode.parse(spec.mode)
    result = LegResult(spec.label, mode.value, spec.seed, success=False, notes=list(spec.notes))
    try:
        cfg = leg_config(ctx, spec)
        log(f"Leg {spec.label} [{mode.value}] seed {spec.seed}", "INFO", ctx.verbose)
        use_cache = bool(cfg["time_cache"]["enabled"])
        teacher, _ = build_teacher(ctx.fp_model, ctx.sched, use_cache, ctx.time_cache() if use_cache else None)

        with OperationTimer() as calib_timer:
            q_model = quantize_model(ctx.fp_model, teacher, cfg, ctx.sched, spec.seed)
        result.timings["calibration_ms"] = calib_timer.get_duration()

        if mode is PipelineMode.S2P and dataset is None:
            pipeline = cfg["pipeline"]
            dataset, generation_ms = ctx.dataset(
                int(pipeline["num_conditions"]),
                int(pipeline["steps_per_prompt"]),
                derive_seed(spec.seed, "dataset"),
                dataset_guidance(cfg),
            )
            result.timings["generation_ms"] = generation_ms
        if dataset is not None:
            result.stats["dataset_records"] = len(dataset)
            result.stats["dataset_bytes"] = dataset.nbytes()

        log_path = None
        if log_dir is not None:
            slug = spec.label.replace("+", "plus_").replace(" ", "_").lower()
            log_path = Path(log_dir) / f"{slug}_seed{spec.seed}.jsonl"
        train_log = TrainLog(log_path, per_layer=bool(cfg["train_log"]["per_layer"]))
        stability_cfg = StabilityConfig.from_config(cfg["stability"])
        q_model, train_log = train_qat(
            q_model,
            teacher,
            dataset,
            mode,
            DistillConfig.from_config(cfg["distill"]),
            stability_cfg,
            QATConfig.from_config(cfg["qat"], seed=derive_seed(spec.seed, "qat")),
            sched=ctx.sched,
            data=ctx.data,
            guidance_scale=dataset_guidance(cfg),
            train_log=train_log,
            callback=callback,
            verbose=ctx.verbose,
        )
        result.timings["train_ms"] = train_log.summary.pop("train_ms", 0.0)
        result.timings["stability_ms"] = train_log.summary.pop("stability_ms", 0.0)
        result.stats.update(training_statistics(train_log, stability_cfg.grad_window))

        with OperationTimer() as eval_timer:
            result.report = ctx.evaluate(q_model, cfg, spec.label)
        result.timings["evaluation_ms"] = eval_timer.get_duration()
        result.success = True
    except Exception as e:
        result.error = f"{type(e).__name__}: {e}"
        log(f"Leg {spec.label} seed {spec.seed} failed: {result.error}", "ERROR", True)
    return result


# =============================================================================
# AGGREGATION
# =============================================================================

def mean_by_label(results: Sequence[LegResult], metrics: Sequence[str]) -> List[Dict[str, Any]]:
    """Seed-mean of each metric per leg label, in first-seen label order."""
    labels: List[str] = []
    for r in results:
        if r.label not in labels:
            labels.append(r.label)
    rows = []
    for label in labels:
        legs = [r for r in results if r.label == label and r.success]
        row: Dict[str, Any] = {"label": label, "seeds": len(legs)}
        for metric in metrics:
            values = [r.row().get(metric) for r in legs]
            values = [v for v in values if v is not None]
            row[metric] = float(np.mean(values)) if values else None
        failed = [r.seed for r in results if r.label == label and not r.success]
        if failed:
            row["failed_seeds"] = failed
        rows.append(row)
    return rows


def count_seeds(results: Sequence[LegResult], left: str, right: str, metric: str,
                better: Callable[[float, float], bool]) -> Dict[str, int]:
    """In how many seeds the `left` leg beats the `right` leg on a metric."""
    by_seed: Dict[int, Dict[str, Any]] = {}
    for r in results:
        if r.success:
            by_seed.setdefault(r.seed, {})[r.label] = r.row().get(metric)
    wins = total = 0
    for values in by_seed.values():
        a, b = values.get(left), values.get(right)
        if a is None or b is None:
            continue
        total += 1
        wins += int(better(a, b))
    return {"wins": wins, "seeds": total}


def timing_rows(results: Sequence[LegResult]) -> List[Dict[str, Any]]:
    return [{"label": r.label, "seed": r.seed, **{k: round(v, 1) for k, v in r.timings.items()}} for r in results]
