"""
Quantization Workflows Module.

Workflow classes that drive the src/ modules over a run directory.

Available Workflows:
- QuantizationWorkflow: train-fp, gen-dataset, calibrate, train-qat, sample, evaluate
- PipelineComparisonWorkflow: serial vs parallel vs S2P at a matched budget
- DatasetTradeoffWorkflow: few-conditions vs many-conditions latent datasets
- AblationWorkflow: cumulative component additions

Usage:
    from shared import RunConfig
    from workflows import QuantizationWorkflow

    result = QuantizationWorkflow(RunConfig.load()).run(command="train-fp")
"""

from .base_workflow import (
    BaseWorkflow,
    WorkflowResult,
    StepResult,
    VerificationResult,
    VerificationStatus
)

from .quantization_workflow import (
    COMMANDS,
    ArtifactPaths,
    QuantizationWorkflow,
)

from .experiment_runner import (
    ExperimentContext,
    LegResult,
    LegSpec,
    run_leg,
)

from .pipeline_comparison import PipelineComparisonWorkflow, compare_pipelines
from .dataset_tradeoff import DatasetTradeoffWorkflow, dataset_tradeoff_experiment
from .ablation import AblationWorkflow, build_ablation_grid, run_ablation
from .report_builder import build_summary

__all__ = [
    # Base classes
    "BaseWorkflow",
    "WorkflowResult",
    "StepResult",
    "VerificationResult",
    "VerificationStatus",

    # Per-command workflow
    "COMMANDS",
    "ArtifactPaths",
    "QuantizationWorkflow",

    # Experiments
    "ExperimentContext",
    "LegResult",
    "LegSpec",
    "run_leg",
    "PipelineComparisonWorkflow",
    "compare_pipelines",
    "DatasetTradeoffWorkflow",
    "dataset_tradeoff_experiment",
    "AblationWorkflow",
    "build_ablation_grid",
    "run_ablation",
    "build_summary",
]
