#!/usr/bin/env python3
"""
Quantization Workflow

Runs the single-artifact commands of a quantization run:
train-fp -> gen-dataset -> calibrate -> train-qat -> sample / evaluate.

Every command reads its inputs from the run directory, refuses to start
when an upstream artifact is missing and writes its resolved config next
to its outputs.

Usage:
    from workflows.quantization_workflow import QuantizationWorkflow

    workflow = QuantizationWorkflow(RunConfig.load("config.yaml"))
    result = workflow.run(command="train-qat", mode="s2p")
"""

import json
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import torch

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import RunConfig, derive_seed
from src.artifact_io import fingerprint_tensors
from src.denoiser import DenoiserConfig, DenoiserModel, load_checkpoint, save_checkpoint
from src.diffcore import NoiseSchedule, sample_batch, schedule_from_config
from src.evaluation import evaluate_pair, generate_images, save_grid, write_report
from src.fp_trainer import ConvergenceError, FPTrainConfig, noise_prediction_mse, train_fp
from src.latent_dataset import (
    LatentDataset,
    generate_serial_dataset,
    latent_range_report,
    make_conditions,
)
from src.metrics import (
    extract_features,
    frechet_from_features,
    load_feature_extractor,
    save_feature_extractor,
    train_feature_extractor,
)
from src.qat_trainer import (
    DistillConfig,
    PipelineMode,
    QATConfig,
    StabilityConfig,
    train_qat,
)
from src.quant_model import (
    QuantizedModel,
    apply_weight_scales,
    attach_quantizers,
    bank_parameter_report,
    calibrate_banks,
    load_quant_pack,
    load_quantized_model,
    save_quant_pack,
    save_quantized_model,
)
from src.quantcore import QuantConfig
from src.timecache import (
    TimeCache,
    load_time_cache,
    precompute_time_cache,
    save_time_cache,
    strip_time_layers,
    time_layer_parameter_count,
)
from src.toy_data import SyntheticShapes, to_unit_range
from src.train_log import OperationTimer, TrainLog

from .base_workflow import BaseWorkflow, WorkflowResult


COMMANDS = ("train-fp", "gen-dataset", "calibrate", "train-qat", "sample", "evaluate")


# =============================================================================
# RUN DIRECTORY LAYOUT
# =============================================================================

@dataclass
class ArtifactPaths:
    """File names of every artifact inside one run directory."""
    root: Path

    @property
    def fp_model(self) -> Path:
        return self.root / "fp_model.dqnt"

    @property
    def feature_extractor(self) -> Path:
        return self.root / "feature_extractor.dqnt"

    @property
    def time_cache(self) -> Path:
        return self.root / "time_cache.dqnt"

    @property
    def latents(self) -> Path:
        return self.root / "latents.dqnt"

    @property
    def quant_pack(self) -> Path:
        return self.root / "quant_pack.dqnt"

    @property
    def timings(self) -> Path:
        return self.root / "timings.jsonl"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    def q_model(self, mode: str) -> Path:
        return self.root / f"q_model_{mode}.dqnt"

    def train_log(self, mode: str) -> Path:
        return self.root / f"train_log_{mode}.jsonl"


# =============================================================================
# SHARED BUILDING BLOCKS
# =============================================================================

def eval_guidance(run_config: RunConfig) -> Optional[float]:
    return run_config["sampling"]["guidance_scale"]


def dataset_guidance(run_config: RunConfig) -> Optional[float]:
    """Serial latents follow the evaluation guidance unless turned off."""
    return eval_guidance(run_config) if run_config["pipeline"]["use_eval_guidance"] else None


def build_teacher(
    fp_model: DenoiserModel,
    sched: NoiseSchedule,
    use_cache: bool,
    cache: Optional[TimeCache] = None,
) -> Tuple[DenoiserModel, Optional[TimeCache]]:
    """
    The model quantizers are attached to and distilled against: the
    stripped FP model with its time cache, or the full FP model.
    """
    if not use_cache:
        return fp_model, None
    cache = cache if cache is not None else precompute_time_cache(fp_model, sched)
    teacher = strip_time_layers(fp_model).bind_time_cache(cache)
    teacher.eval()
    return teacher, cache


@torch.no_grad()
def calibration_batches(
    fp_model: DenoiserModel,
    sched: NoiseSchedule,
    num_conditions: int,
    num_classes: int,
    seed: int,
    guidance_scale: Optional[float] = None,
) -> List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """One (x_t, t, class_ids) batch per step of FP inference trajectories."""
    conditions = make_conditions(num_conditions, num_classes, derive_seed(seed, "calibration"))
    chain = sample_batch(
        fp_model, [c.class_id for c in conditions], [c.seed for c in conditions], sched,
        guidance_scale, keep_trajectory=True,
    )
    class_ids = torch.tensor([c.class_id for c in conditions], dtype=torch.long)
    T = sched.T
    return [
        (chain[k], torch.full((len(conditions),), T - 1 - k, dtype=torch.long), class_ids)
        for k in range(T)
    ]


def quantize_model(
    fp_model: DenoiserModel,
    teacher: DenoiserModel,
    run_config: RunConfig,
    sched: NoiseSchedule,
    seed: int,
) -> QuantizedModel:
    """Calibrate activation banks on FP trajectories and attach quantizers to the teacher."""
    quant = run_config["quant"]
    cfg = QuantConfig.from_config(quant)
    batches = calibration_batches(
        fp_model, sched, int(quant["calib_conditions"]), fp_model.config.num_classes, seed,
        dataset_guidance(run_config),
    )
    banks = calibrate_banks(teacher, batches, cfg, sched.T, interpolate=bool(quant["calib_interpolate"]))
    return attach_quantizers(teacher, cfg, banks, sched.T)


def reference_images(data: SyntheticShapes, n: int, seed: int) -> torch.Tensor:
    """Held-out real samples for FD to the data distribution."""
    generator = torch.Generator().manual_seed(derive_seed(seed, "reference"))
    images, _ = data.sample(n, generator)
    return images


# =============================================================================
# WORKFLOW
# =============================================================================

class QuantizationWorkflow(BaseWorkflow):
    """
    Per-command workflow over one run directory.

    Each command is one step; its artifact paths are listed in the
    workflow result and its wall time goes to timings.jsonl.
    """

    @property
    def name(self) -> str:
        return "quantization"

    def __init__(self, run_config: RunConfig, verbose: Optional[bool] = None):
        super().__init__(run_config, verbose)
        self.paths = ArtifactPaths(self.output_dir)
        self.sched = schedule_from_config(run_config["schedule"])
        self.data = SyntheticShapes.from_config(run_config["data"], run_config["model"])
        threads = run_config["run"]["num_threads"]
        if threads:
            torch.set_num_threads(int(threads))

    # ==================== Helpers ====================

    def record_timing(self, command: str, **durations_ms: float):
        """Append wall times to timings.jsonl, kept apart from reproducible artifacts."""
        entry = {"command": command, "time": datetime.now().isoformat()}
        entry.update({k: round(float(v), 3) for k, v in durations_ms.items()})
        with open(self.paths.timings, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    def load_fp_model(self) -> DenoiserModel:
        model = load_checkpoint(self.require(self.paths.fp_model, "train-fp"))
        if model.schedule_fingerprint not in (None, self.sched.fingerprint()):
            self.log("FP checkpoint was trained with a different schedule", "WARNING")
        return model

    def load_teacher(self, fp_model: DenoiserModel) -> Tuple[DenoiserModel, Optional[TimeCache]]:
        if not self.run_config["time_cache"]["enabled"]:
            return fp_model, None
        cache = load_time_cache(self.require(self.paths.time_cache, "calibrate"), fp_model, self.sched)
        return build_teacher(fp_model, self.sched, True, cache)

    def load_quantized(self, mode: str, fp_model: DenoiserModel) -> QuantizedModel:
        q_model = load_quantized_model(self.require(self.paths.q_model(mode), f"train-qat --mode {mode}"))
        if q_model.stripped:
            cache = load_time_cache(self.require(self.paths.time_cache, "calibrate"), fp_model, self.sched)
            q_model.bind_time_cache(cache)
        return q_model

    def _mode(self, mode: Optional[str]) -> PipelineMode:
        return PipelineMode.parse(mode or self.run_config["pipeline"]["mode"])

    # ==================== Commands ====================

    def train_fp(self) -> Dict[str, Any]:
        """Train the FP denoiser and the metric feature extractor."""
        rc = self.run_config
        seed = rc.seed
        fp_cfg = FPTrainConfig.from_config(rc["fp_train"])

        torch.manual_seed(derive_seed(seed, "fp_init"))
        model = DenoiserModel(DenoiserConfig.from_config(rc["model"], rc["data"]))
        with OperationTimer() as timer:
            model, history = train_fp(model, self.data, self.sched, fp_cfg, seed=seed, verbose=self.verbose)
        save_checkpoint(model, self.paths.fp_model, self.sched.to_meta())

        fx_section = rc["feature_extractor"]
        with OperationTimer() as fx_timer:
            fx = train_feature_extractor(
                self.data,
                steps=int(fx_section["steps"]),
                batch_size=int(fx_section["batch_size"]),
                lr=float(fx_section["lr"]),
                seed=seed,
                verbose=self.verbose,
            )
        save_feature_extractor(fx, self.paths.feature_extractor)

        holdout = int(rc["data"]["holdout_size"])
        conditions = make_conditions(holdout, self.data.num_classes, derive_seed(seed, "fp_holdout"))
        fp_images = generate_images(model, conditions, self.sched, eval_guidance(rc), verbose=self.verbose)
        fd_data = frechet_from_features(
            extract_features(to_unit_range(fp_images), fx),
            extract_features(to_unit_range(reference_images(self.data, holdout, seed)), fx),
            float(rc["eval"]["shrinkage"]),
        )
        summary = {
            "loss_history": history,
            "holdout_mse": noise_prediction_mse(model, self.data, self.sched, n=holdout, seed=seed),
            "fd_data": fd_data,
            "fingerprints": {
                "model": model.fingerprint(),
                "feature_extractor": fx.fingerprint(),
                "schedule": self.sched.fingerprint(),
            },
        }
        self.save_results(summary, "fp_train.yaml", subfolder="reports")
        self.record_timing("train-fp", train_ms=timer.get_duration(), feature_extractor_ms=fx_timer.get_duration())

        fd_target = rc["fp_train"]["fd_target"]
        if fd_target is not None and fd_data > float(fd_target):
            raise ConvergenceError(history, float(fd_target), metric="FD to held-out data", value=fd_data)
        return {"files": [str(self.paths.fp_model), str(self.paths.feature_extractor)], **summary}

    def gen_dataset(self) -> Dict[str, Any]:
        """Serial latent dataset from FP inference trajectories."""
        rc = self.run_config
        fp_model = self.load_fp_model()
        pipeline = rc["pipeline"]
        seed = derive_seed(rc.seed, "dataset")
        conditions = make_conditions(int(pipeline["num_conditions"]), fp_model.config.num_classes, seed)
        with OperationTimer() as timer:
            dataset = generate_serial_dataset(
                fp_model,
                conditions,
                int(pipeline["steps_per_prompt"]),
                self.sched,
                seed=seed,
                guidance_scale=dataset_guidance(rc),
                batch_size=int(pipeline["generation_batch_size"]),
                verbose=self.verbose,
            )
        dataset.save(self.paths.latents)

        range_conditions = make_conditions(
            int(rc["eval"]["curve_images"]), fp_model.config.num_classes, derive_seed(rc.seed, "latent_range")
        )
        report = latent_range_report(fp_model, self.sched, range_conditions, guidance_scale=dataset_guidance(rc))
        if report.low_confidence:
            self.log(f"Latent range report is low confidence (eps MSE {report.eps_mse:.3f})", "WARNING")
        summary = {
            "records": len(dataset),
            "bytes": dataset.nbytes(),
            "coverage": dataset.coverage_report(),
            "latent_range": {"max_delta": report.max_delta(), "low_confidence": report.low_confidence},
        }
        self.save_results(summary, "dataset.yaml", subfolder="reports")
        self.save_results(report.to_dict(), "latent_range.yaml", subfolder="reports")
        self.record_timing("gen-dataset", generation_ms=timer.get_duration())
        return {"files": [str(self.paths.latents)], **summary}

    def calibrate(self) -> Dict[str, Any]:
        """Time cache plus per-timestep activation banks and initial weight scales."""
        rc = self.run_config
        fp_model = self.load_fp_model()
        files = []
        with OperationTimer() as timer:
            teacher, cache = build_teacher(fp_model, self.sched, bool(rc["time_cache"]["enabled"]))
            if cache is not None:
                save_time_cache(cache, self.paths.time_cache)
                files.append(str(self.paths.time_cache))
            q_model = quantize_model(fp_model, teacher, rc, self.sched, rc.seed)
        save_quant_pack(q_model, self.paths.quant_pack, provenance={
            "calib_conditions": int(rc["quant"]["calib_conditions"]),
            "calib_interpolate": bool(rc["quant"]["calib_interpolate"]),
            "seed": rc.seed,
            "guidance_scale": dataset_guidance(rc),
        })
        files.append(str(self.paths.quant_pack))
        summary = {"banks": bank_parameter_report(q_model)}
        if cache is not None:
            summary["time_cache"] = {
                "bytes": cache.nbytes(),
                "removed_parameter_bytes": time_layer_parameter_count(fp_model) * 4,
            }
        self.save_results(summary, "calibration.yaml", subfolder="reports")
        self.record_timing("calibrate", calibration_ms=timer.get_duration())
        return {"files": files, **summary}

    def train_qat(self, mode: Optional[str] = None) -> Dict[str, Any]:
        """Fine-tune the calibrated quantized model under one data pipeline."""
        rc = self.run_config
        mode = self._mode(mode)
        fp_model = self.load_fp_model()
        teacher, _ = self.load_teacher(fp_model)

        cfg, banks, weight_scales, _ = load_quant_pack(self.require(self.paths.quant_pack, "calibrate"))
        if cfg.to_dict() != QuantConfig.from_config(rc["quant"]).to_dict():
            self.log("Quantizer pack was calibrated with different quant settings; using the pack's", "WARNING")
        q_model = attach_quantizers(teacher, cfg, banks, self.sched.T)
        apply_weight_scales(q_model, weight_scales)

        dataset = None
        if mode is PipelineMode.S2P:
            dataset = LatentDataset.load(self.require(self.paths.latents, "gen-dataset"))

        train_log = TrainLog(self.paths.train_log(mode.value), per_layer=bool(rc["train_log"]["per_layer"]))
        q_model, train_log = train_qat(
            q_model,
            teacher,
            dataset,
            mode,
            DistillConfig.from_config(rc["distill"]),
            StabilityConfig.from_config(rc["stability"]),
            QATConfig.from_config(rc["qat"], seed=derive_seed(rc.seed, "qat")),
            sched=self.sched,
            data=self.data,
            guidance_scale=dataset_guidance(rc),
            train_log=train_log,
            verbose=self.verbose,
        )
        timings = {k: train_log.summary.pop(k) for k in ("train_ms", "stability_ms") if k in train_log.summary}
        save_quantized_model(q_model, self.paths.q_model(mode.value), extra={"mode": mode.value})
        self.save_results(train_log.summary, f"train_qat_{mode.value}.yaml", subfolder="reports")
        self.record_timing(f"train-qat:{mode.value}", **timings)
        return {
            "files": [str(self.paths.q_model(mode.value)), str(self.paths.train_log(mode.value))],
            **train_log.summary,
        }

    def sample(self, mode: Optional[str] = None) -> Dict[str, Any]:
        """Matched-seed FP and quantized samples written as PNG grids."""
        rc = self.run_config
        mode = self._mode(mode)
        fp_model = self.load_fp_model()
        q_model = self.load_quantized(mode.value, fp_model)
        sampling = rc["sampling"]
        conditions = make_conditions(int(sampling["num_images"]), fp_model.config.num_classes, int(sampling["seed"]))
        guidance = eval_guidance(rc)

        fp_images = generate_images(fp_model, conditions, self.sched, guidance, verbose=self.verbose)
        q_images = generate_images(q_model, conditions, self.sched, guidance, verbose=self.verbose)
        files = []
        if sampling["save_grid"]:
            files.append(str(save_grid(fp_images, self.paths.samples / "fp.png")))
            files.append(str(save_grid(q_images, self.paths.samples / f"q_{mode.value}.png")))
        summary = {
            "mode": mode.value,
            "conditions": [{"class_id": c.class_id, "seed": c.seed} for c in conditions],
            "fp_images": fingerprint_tensors({"images": fp_images}),
            "q_images": fingerprint_tensors({"images": q_images}),
        }
        files.append(self.save_results(summary, f"samples_{mode.value}.yaml", subfolder="samples"))
        return {"files": files, **summary}

    def evaluate(self, mode: Optional[str] = None) -> Dict[str, Any]:
        """FD-FP, SSIM, PFD (and FD to data) of one trained quantized model."""
        rc = self.run_config
        mode = self._mode(mode)
        fp_model = self.load_fp_model()
        q_model = self.load_quantized(mode.value, fp_model)
        fx = load_feature_extractor(self.require(self.paths.feature_extractor, "train-fp"))
        ev = rc["eval"]
        conditions = make_conditions(int(ev["num_images"]), fp_model.config.num_classes, int(ev["seed"]))
        with OperationTimer() as timer:
            report = evaluate_pair(
                q_model,
                fp_model,
                conditions,
                self.sched,
                fx,
                guidance_scale=eval_guidance(rc),
                batch_size=int(ev["batch_size"]),
                shrinkage=float(ev["shrinkage"]),
                pfd_layers=ev["pfd_layers"],
                reference_images=reference_images(self.data, int(ev["num_images"]), int(ev["seed"])),
                label=mode.value,
                verbose=self.verbose,
            )
        path = write_report(report, self.paths.reports / f"eval_{mode.value}.yaml")
        self.record_timing(f"evaluate:{mode.value}", evaluation_ms=timer.get_duration())
        return {"files": [str(path), str(path.with_suffix(".md"))], **report.row()}

    # ==================== Main Workflow ====================

    def run(self, command: str = "train-fp", mode: Optional[str] = None, **kwargs) -> WorkflowResult:
        """
        Execute one command.

        Args:
            command: One of COMMANDS
            mode: Pipeline mode for train-qat / sample / evaluate

        Returns:
            WorkflowResult; failures are re-raised after being recorded
        """
        if command not in COMMANDS:
            raise ValueError(f"Unknown command {command!r}; expected one of {COMMANDS}")
        start_time = datetime.now()
        self.log("=" * 50)
        self.log(f"Command: {command}")
        self.log("=" * 50)

        self.run_config.write_resolved(command)
        handlers = {
            "train-fp": self.train_fp,
            "gen-dataset": self.gen_dataset,
            "calibrate": self.calibrate,
            "train-qat": lambda: self.train_qat(mode),
            "sample": lambda: self.sample(mode),
            "evaluate": lambda: self.evaluate(mode),
        }
        step = self.run_step(command, handlers[command], reraise=True)
        data = dict(step.data or {})
        files = data.pop("files", [])
        return self._create_workflow_result(True, start_time, data, files)
