#!/usr/bin/env python3
"""
Ablation Workflow

Adds the components one at a time on top of a plain serial run:
S2P pipeline, time-information cache, per-timestep activation banks,
sensitive-layer distillation and selective freezing. Every row shares the
seeds and the evaluation set.

Usage:
    python -m workflows.ablation --config config.yaml experiments.seeds=[0,1]
"""

import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import ConfigError, RunConfig, deep_merge, save_yaml
from src.evaluation import SUBSTITUTION_NOTICE, markdown_table

from .base_workflow import BaseWorkflow, WorkflowResult
from .experiment_runner import (
    BASE_OVERRIDES,
    ExperimentContext,
    LegResult,
    LegSpec,
    mean_by_label,
    run_leg,
    timing_rows,
)
from .quantization_workflow import QuantizationWorkflow


# Each entry is applied on top of everything before it.
ABLATION_STEPS: Dict[str, Dict[str, Any]] = {
    "Base": BASE_OVERRIDES,
    "+S2P": {"pipeline": {"mode": "s2p"}},
    "+Time": {"time_cache": {"enabled": True}, "quant": {"quantize_time_layers": False}},
    "+Mstep": {"quant": {"multi_timestep": True}},
    "+Distill": {"distill": {"enabled": True}},
    "+Freeze": {"stability": {"freeze": True}},
}

METRICS = ("fd_fp", "ssim", "pfd", "fd_data", "osc_pct")


def build_ablation_grid(labels: Sequence[str]) -> List[Tuple[str, Dict[str, Any]]]:
    """
    Cumulative overrides per row.

    Raises:
        ConfigError: unknown row label, or a grid not starting at Base
    """
    unknown = [label for label in labels if label not in ABLATION_STEPS]
    if unknown:
        raise ConfigError(f"Unknown ablation rows {unknown}; known rows: {list(ABLATION_STEPS)}")
    if not labels or labels[0] != "Base":
        raise ConfigError("The ablation grid must start with the Base row")
    grid = []
    overrides: Dict[str, Any] = {}
    for label in labels:
        overrides = deep_merge(overrides, ABLATION_STEPS[label])
        grid.append((label, overrides))
    return grid


def row_notes(overrides: Dict[str, Any]) -> List[str]:
    """Flags for combinations that run but are not part of the intended stack."""
    notes = []
    if overrides.get("stability", {}).get("freeze") and not overrides.get("distill", {}).get("enabled"):
        notes.append("freezing without distillation")
    return notes


def ablation_checks(results: Sequence[LegResult], labels: Sequence[str], tolerance: float = 0.05) -> Dict[str, Any]:
    """
    Final row against Base per seed, and the largest seed-mean FD-FP
    increase caused by a single addition.
    """
    fd: Dict[int, Dict[str, float]] = {}
    for r in results:
        if r.success and r.report is not None:
            fd.setdefault(r.seed, {})[r.label] = r.report.fd_fp
    final = labels[-1]
    compared = [s for s, row in fd.items() if "Base" in row and final in row]
    wins = sum(int(fd[s][final] < fd[s]["Base"]) for s in compared)

    means = {}
    for label in labels:
        values = [row[label] for row in fd.values() if label in row]
        if values:
            means[label] = float(np.mean(values))
    degradations = {}
    for previous, current in zip(labels, labels[1:]):
        if previous in means and current in means:
            degradations[current] = (means[current] - means[previous]) / max(means[previous], 1e-12)
    worst = max(degradations.values()) if degradations else None
    return {
        "final_row": final,
        "final_beats_base": {"wins": wins, "seeds": len(compared)},
        "relative_fd_fp_change": degradations,
        "worst_single_step_change": worst,
        "no_step_degrades_beyond_tolerance": worst is None or worst <= tolerance,
    }


def run_ablation(
    ctx: ExperimentContext,
    config_grid: Sequence[Tuple[str, Dict[str, Any]]],
    seeds: Sequence[int],
    log_dir: Optional[Path] = None,
) -> Dict[str, Any]:
    """
    Run every cumulative configuration for every seed.

    Returns:
        Table dict with per-leg rows, seed means, checks and the leg results
        under "legs"
    """
    results: List[LegResult] = []
    for seed in seeds:
        for label, overrides in config_grid:
            mode = overrides.get("pipeline", {}).get("mode", ctx.run_config["pipeline"]["mode"])
            spec = LegSpec(label, mode, seed, overrides=overrides, notes=row_notes(overrides))
            results.append(run_leg(ctx, spec, log_dir=log_dir))
    labels = [label for label, _ in config_grid]
    return {
        "substitution_notice": SUBSTITUTION_NOTICE,
        "seeds": list(seeds),
        "rows": [r.row() for r in results],
        "means": mean_by_label(results, METRICS),
        "checks": ablation_checks(results, labels),
        "legs": results,
    }


class AblationWorkflow(BaseWorkflow):
    """ablate command."""

    @property
    def name(self) -> str:
        return "ablate"

    def run(self, **kwargs) -> WorkflowResult:
        start_time = datetime.now()
        self.log("=" * 50)
        self.log("Starting ablation")
        self.log("=" * 50)
        self.run_config.write_resolved(self.name)

        experiments = self.run_config["experiments"]
        grid = build_ablation_grid(experiments["ablation_rows"])
        base = QuantizationWorkflow(self.run_config, self.verbose)
        ctx = self.run_step("load FP artifacts", ExperimentContext.from_workflow, base, reraise=True).data
        step = self.run_step(
            "run rows", run_ablation, ctx, grid, experiments["seeds"], log_dir=self.output_dir / "legs" / "ablation"
        )
        if not step.success:
            return self._create_workflow_result(False, start_time, {}, [])

        table = step.data
        legs = table.pop("legs")
        self.verify(step, "final stack beats Base",
                    table["checks"]["final_beats_base"]["wins"] == table["checks"]["final_beats_base"]["seeds"],
                    f"{table['checks']['final_beats_base']}", warn_only=True)
        reports = self.output_dir / "reports"
        files = [
            save_yaml(table, str(reports / "ablation.yaml")),
            self.save_results({"legs": timing_rows(legs)}, "ablation.timing.yaml", subfolder="reports"),
        ]
        md = ["# Ablation", "", f"> {SUBSTITUTION_NOTICE}", "", "## Seed means\n", markdown_table(table["means"]),
              "## Per seed\n", markdown_table(table["rows"], ["label", "seed", *METRICS, "notes", "error"])]
        md_path = reports / "ablation.md"
        md_path.write_text("\n".join(md), encoding="utf-8")
        files.append(str(md_path))

        summary = {"means": table["means"], "checks": table["checks"]}
        return self._create_workflow_result(all(r.success for r in legs), start_time, summary, files)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Cumulative component ablation")
    parser.add_argument("--config", "-c", help="Path to config file")
    parser.add_argument("overrides", nargs="*", help="key.path=value overrides")
    args = parser.parse_args()

    result = AblationWorkflow(RunConfig.load(args.config, args.overrides)).run()
    print(f"\nSuccess: {result.success}")
    print(f"Files: {result.output_files}")
