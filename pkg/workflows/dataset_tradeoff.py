#!/usr/bin/env python3
"""
Dataset Trade-off Workflow

Trains S2P fine-tuning on two serial datasets with a matched record count:
few conditions with many latents per trajectory, and many conditions with
one latent each. Reports train/validation loss curves, the final gap,
FD-FP, dataset size and generation time.

Usage:
    python -m workflows.dataset_tradeoff --config config.yaml
"""

import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import RunConfig, derive_seed, save_yaml
from src.evaluation import SUBSTITUTION_NOTICE, markdown_table
from src.latent_dataset import LatentDataset, make_conditions
from src.qat_trainer import evaluate_loss

from .base_workflow import BaseWorkflow, WorkflowResult
from .experiment_runner import ExperimentContext, LegSpec, run_leg
from .quantization_workflow import QuantizationWorkflow, dataset_guidance


def _curve_callback(ctx: ExperimentContext, train_set: LatentDataset, validation: LatentDataset,
                    curve: List[Dict[str, Any]], every: int, last: int, label: str):
    conditions = make_conditions(
        int(ctx.run_config["eval"]["curve_images"]), ctx.data.num_classes,
        derive_seed(int(ctx.run_config["eval"]["seed"]), "curve"),
    )

    def _callback(iteration, q_model, train_log):
        if iteration % every != 0 and iteration != last:
            return
        q_model.eval()
        point = {
            "iteration": iteration,
            "train_loss": evaluate_loss(q_model, ctx.fp_model, train_set),
            "validation_loss": evaluate_loss(q_model, ctx.fp_model, validation),
            "fd_fp": ctx.evaluate(q_model, ctx.run_config, label, conditions).fd_fp,
        }
        point["gap"] = point["validation_loss"] - point["train_loss"]
        curve.append(point)
        q_model.train()

    return _callback


def dataset_tradeoff_experiment(ctx: ExperimentContext, seed: int, log_dir: Optional[Path] = None) -> Dict[str, Any]:
    """
    Returns:
        Report dict with one row per dataset, loss/FD curves, checks and
        generation wall times under "timings"
    """
    rc = ctx.run_config
    tradeoff = rc["experiments"]["tradeoff"]
    guidance = dataset_guidance(rc)
    iterations = int(rc["qat"]["iterations"])
    every = max(iterations // max(int(tradeoff["checkpoints"]), 1), 1)

    validation, _ = ctx.dataset(
        int(tradeoff["validation_conditions"]), int(tradeoff["validation_steps_per_prompt"]),
        derive_seed(seed, "tradeoff", "validation"), guidance,
    )
    plans = {
        "few_conditions": (int(tradeoff["few_conditions"]), int(tradeoff["few_steps_per_prompt"])),
        "many_conditions": (int(tradeoff["many_conditions"]), 1),
    }

    rows, curves, timings = [], {}, {}
    for label, (num_conditions, steps) in plans.items():
        train_set, generation_ms = ctx.dataset(num_conditions, steps, derive_seed(seed, "tradeoff", label), guidance)
        timings[label] = {"generation_ms": round(generation_ms, 1)}
        curve: List[Dict[str, Any]] = []
        callback = _curve_callback(ctx, train_set, validation, curve, every, iterations, label)
        leg = run_leg(ctx, LegSpec(label, "s2p", seed), dataset=train_set, callback=callback, log_dir=log_dir)
        timings[label].update({k: round(v, 1) for k, v in leg.timings.items()})
        curves[label] = curve

        row: Dict[str, Any] = {
            "label": label,
            "conditions": num_conditions,
            "steps_per_prompt": steps,
            "records": len(train_set),
            "bytes": train_set.nbytes(),
        }
        if leg.success:
            final = curve[-1] if curve else {}
            row.update({
                "train_loss": final.get("train_loss"),
                "validation_loss": final.get("validation_loss"),
                "gap": final.get("gap"),
                "fd_fp": leg.report.fd_fp,
                "ssim": leg.report.ssim_mean,
            })
        else:
            row["error"] = leg.error
        rows.append(row)

    checks: Dict[str, Any] = {}
    few, many = rows
    if "error" not in few and "error" not in many:
        checks["many_gap_le_few_gap"] = many["gap"] is not None and few["gap"] is not None and many["gap"] <= few["gap"]
        checks["fd_fp_relative_difference"] = abs(few["fd_fp"] - many["fd_fp"]) / max(few["fd_fp"], many["fd_fp"], 1e-12)
        checks["fd_fp_within_10pct"] = checks["fd_fp_relative_difference"] <= 0.10
    return {
        "substitution_notice": SUBSTITUTION_NOTICE,
        "seed": seed,
        "validation_records": len(validation),
        "rows": rows,
        "curves": curves,
        "checks": checks,
        "timings": timings,
    }


def render_markdown(report: Dict[str, Any], timings: Dict[str, Any]) -> str:
    lines = ["# Dataset trade-off", "", f"> {report['substitution_notice']}", ""]
    lines.append(markdown_table(report["rows"]))
    lines.append("## Wall time (ms)\n")
    lines.append(markdown_table([{"label": k, **v} for k, v in timings.items()]))
    for label, curve in report["curves"].items():
        lines.append(f"## Curve: {label}\n")
        lines.append(markdown_table(curve))
    lines.append("## Checks\n")
    lines.append(markdown_table([{"check": k, "value": v} for k, v in report["checks"].items()]))
    return "\n".join(lines)


class DatasetTradeoffWorkflow(BaseWorkflow):
    """dataset-tradeoff command."""

    @property
    def name(self) -> str:
        return "dataset-tradeoff"

    def run(self, **kwargs) -> WorkflowResult:
        start_time = datetime.now()
        self.log("=" * 50)
        self.log("Starting dataset trade-off experiment")
        self.log("=" * 50)
        self.run_config.write_resolved(self.name)

        base = QuantizationWorkflow(self.run_config, self.verbose)
        ctx = self.run_step("load FP artifacts", ExperimentContext.from_workflow, base, reraise=True).data
        step = self.run_step(
            "train on both datasets", dataset_tradeoff_experiment, ctx, self.run_config.seed,
            log_dir=self.output_dir / "legs" / "tradeoff",
        )
        if not step.success:
            return self._create_workflow_result(False, start_time, {}, [])

        report = step.data
        timings = report.pop("timings")
        self.verify(step, "many-condition gap", bool(report["checks"].get("many_gap_le_few_gap")),
                    "validation gap of the many-condition dataset exceeds the few-condition one", warn_only=True)
        reports = self.output_dir / "reports"
        files = [
            save_yaml(report, str(reports / "dataset_tradeoff.yaml")),
            self.save_results(timings, "dataset_tradeoff.timing.yaml", subfolder="reports"),
        ]
        md_path = reports / "dataset_tradeoff.md"
        md_path.write_text(render_markdown(report, timings), encoding="utf-8")
        files.append(str(md_path))

        success = all("error" not in row for row in report["rows"])
        return self._create_workflow_result(success, start_time, {"rows": report["rows"], "checks": report["checks"]}, files)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Few-conditions vs many-conditions latent datasets")
    parser.add_argument("--config", "-c", help="Path to config file")
    parser.add_argument("overrides", nargs="*", help="key.path=value overrides")
    args = parser.parse_args()

    result = DatasetTradeoffWorkflow(RunConfig.load(args.config, args.overrides)).run()
    print(f"\nSuccess: {result.success}")
    print(f"Files: {result.output_files}")
