#!/usr/bin/env python3
"""
Pipeline Comparison Workflow

Fine-tunes the same calibrated starting point under the serial, parallel
and serial-to-parallel pipelines at a matched budget (same iterations and
batch size) for every configured seed, then tabulates FD-FP, SSIM, PFD and
the weight-oscillation percentage.

Usage:
    python -m workflows.pipeline_comparison --config config.yaml
"""

import operator
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import RunConfig, save_yaml
from src.evaluation import SUBSTITUTION_NOTICE, markdown_table
from src.qat_trainer import PipelineMode

from .base_workflow import BaseWorkflow, WorkflowResult
from .experiment_runner import (
    BASE_OVERRIDES,
    ExperimentContext,
    LegResult,
    LegSpec,
    count_seeds,
    mean_by_label,
    run_leg,
    timing_rows,
)
from .quantization_workflow import QuantizationWorkflow


METRICS = ("fd_fp", "ssim", "pfd", "fd_data", "osc_pct", "grad_osc_index", "loss_fluctuation")
COLUMNS = ("label", "seed", "fd_fp", "ssim", "pfd", "osc_pct", "grad_osc_index", "loss_fluctuation")


def comparison_checks(results: Sequence[LegResult]) -> Dict[str, Dict[str, int]]:
    """Per-seed orderings between the pipelines."""
    return {
        "s2p_fd_fp_le_parallel": count_seeds(results, "s2p", "parallel", "fd_fp", operator.le),
        "s2p_fd_fp_le_serial": count_seeds(results, "s2p", "serial", "fd_fp", operator.le),
        "s2p_ssim_ge_parallel": count_seeds(results, "s2p", "parallel", "ssim", operator.ge),
        "s2p_ssim_ge_serial": count_seeds(results, "s2p", "serial", "ssim", operator.ge),
        "serial_grad_osc_gt_parallel": count_seeds(results, "serial", "parallel", "grad_osc_index", operator.gt),
        "serial_osc_gt_parallel": count_seeds(results, "serial", "parallel", "osc_pct", operator.gt),
        "serial_osc_gt_s2p": count_seeds(results, "serial", "s2p", "osc_pct", operator.gt),
        "serial_osc_ge_2x_s2p": count_seeds(results, "serial", "s2p", "osc_pct", lambda a, b: a >= 2 * b),
    }


def render_markdown(table: Dict[str, Any]) -> str:
    lines = ["# Pipeline comparison", "", f"> {SUBSTITUTION_NOTICE}", ""]
    lines.append("## Seed means\n")
    lines.append(markdown_table(table["means"]))
    lines.append("## Per seed\n")
    lines.append(markdown_table(table["rows"], list(COLUMNS) + ["error"]))
    lines.append("## Orderings (wins / seeds)\n")
    lines.append(markdown_table([{"check": k, **v} for k, v in table["checks"].items()]))
    return "\n".join(lines)


def compare_pipelines(
    ctx: ExperimentContext,
    seeds: Sequence[int],
    modes: Sequence[str] = ("serial", "parallel", "s2p"),
    log_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """
    Run every mode for every seed from the same base settings.

    Returns:
        Table dict with per-leg rows, seed means, ordering checks and the
        leg results under "legs"
    """
    results: List[LegResult] = []
    for seed in seeds:
        for mode in modes:
            mode = PipelineMode.parse(mode).value
            results.append(run_leg(ctx, LegSpec(mode, mode, seed, overrides=BASE_OVERRIDES), log_dir=log_dir))
    return {
        "substitution_notice": SUBSTITUTION_NOTICE,
        "seeds": list(seeds),
        "rows": [r.row() for r in results],
        "means": mean_by_label(results, METRICS),
        "checks": comparison_checks(results),
        "legs": results,
    }


class PipelineComparisonWorkflow(BaseWorkflow):
    """compare-pipelines command."""

    @property
    def name(self) -> str:
        return "compare-pipelines"

    def run(self, **kwargs) -> WorkflowResult:
        start_time = datetime.now()
        self.log("=" * 50)
        self.log("Starting pipeline comparison")
        self.log("=" * 50)
        self.run_config.write_resolved(self.name)

        experiments = self.run_config["experiments"]
        base = QuantizationWorkflow(self.run_config, self.verbose)
        step = self.run_step("load FP artifacts", ExperimentContext.from_workflow, base, reraise=True)
        ctx = step.data
        step = self.run_step(
            "run legs", compare_pipelines, ctx, experiments["seeds"], experiments["compare_modes"],
            log_dir=self.output_dir / "legs" / "compare",
        )
        if not step.success:
            return self._create_workflow_result(False, start_time, {}, [])

        table = step.data
        legs = table.pop("legs")
        for row in table["rows"]:
            self.verify(step, f"{row['label']} seed {row['seed']}", "error" not in row,
                        row.get("error", "ok"), warn_only=True)
        reports = self.output_dir / "reports"
        files = [
            save_yaml(table, str(reports / "compare_pipelines.yaml")),
            self.save_results({"legs": timing_rows(legs)}, "compare_pipelines.timing.yaml", subfolder="reports"),
        ]
        md_path = reports / "compare_pipelines.md"
        md_path.write_text(render_markdown(table), encoding="utf-8")
        files.append(str(md_path))

        summary = {"means": table["means"], "checks": table["checks"]}
        return self._create_workflow_result(all(r.success for r in legs), start_time, summary, files)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Compare serial, parallel and S2P fine-tuning pipelines")
    parser.add_argument("--config", "-c", help="Path to config file")
    parser.add_argument("overrides", nargs="*", help="key.path=value overrides")
    args = parser.parse_args()

    result = PipelineComparisonWorkflow(RunConfig.load(args.config, args.overrides)).run()
    print(f"\nSuccess: {result.success}")
    print(f"Files: {result.output_files}")
