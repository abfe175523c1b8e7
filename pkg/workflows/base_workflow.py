"""
Base Workflow Module for quantization runs.

Provides step bookkeeping, verification records, console logging and
result saving shared by the per-command workflow and the experiment
workflows.
"""

import sys
import time
import traceback
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import MissingArtifactError, RunConfig, log, save_json, save_yaml


class VerificationStatus(Enum):
    """Verification result status."""
    PASSED = "passed"
    FAILED = "failed"
    WARNING = "warning"
    SKIPPED = "skipped"


@dataclass
class VerificationResult:
    """Result of a verification check."""
    name: str
    status: VerificationStatus
    message: str
    details: Optional[Dict] = None


@dataclass
class StepResult:
    """Result of a workflow step."""
    step_name: str
    success: bool
    duration_ms: int
    data: Optional[Any] = None
    error: Optional[str] = None
    verifications: List[VerificationResult] = field(default_factory=list)


@dataclass
class WorkflowResult:
    """Complete workflow execution result."""
    workflow_name: str
    success: bool
    start_time: str
    end_time: str
    total_duration_ms: int
    steps: List[StepResult] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    output_files: List[str] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)


class BaseWorkflow(ABC):
    """
    Base class for quantization workflows.

    Provides common operations like:
    - Timed steps with failure capture
    - Verification records
    - Upstream artifact checks
    - Result saving
    """

    def __init__(self, run_config: RunConfig, verbose: Optional[bool] = None):
        """
        Initialize workflow.

        Args:
            run_config: Resolved run configuration
            verbose: Print progress messages (defaults to run.verbose)
        """
        self.run_config = run_config
        self.output_dir = run_config.output_dir
        self.verbose = run_config.verbose if verbose is None else verbose

        # Create output directory
        self.output_dir.mkdir(parents=True, exist_ok=True)

        # Results tracking
        self._steps: List[StepResult] = []
        self._errors: List[str] = []

    def log(self, message: str, level: str = "INFO"):
        """Log a message if verbose mode is enabled."""
        log(message, level, self.verbose)

    # ==================== Core Operations ====================

    def run_step(self, step_name: str, fn: Callable[..., Any], *args, reraise: bool = False, **kwargs) -> StepResult:
        """
        Run one step, timing it and recording its outcome.

        Args:
            step_name: Name recorded in the step list
            fn: Callable producing the step's data
            reraise: Propagate exceptions after recording them

        Returns:
            StepResult with the callable's return value as data
        """
        start_time = time.time()
        self.log(f"Step: {step_name}")
        try:
            data = fn(*args, **kwargs)
        except Exception as e:
            step = StepResult(
                step_name=step_name,
                success=False,
                duration_ms=int((time.time() - start_time) * 1000),
                error=f"{type(e).__name__}: {e}",
            )
            self._add_step(step)
            self.log(f"{step_name} failed: {e}", "ERROR")
            if reraise:
                raise
            if self.verbose:
                traceback.print_exc()
            return step

        step = StepResult(
            step_name=step_name,
            success=True,
            duration_ms=int((time.time() - start_time) * 1000),
            data=data,
        )
        self._add_step(step)
        self.log(f"{step_name} done in {step.duration_ms} ms", "SUCCESS")
        return step

    def verify(self, step: StepResult, name: str, passed: bool, message: str, details: Optional[Dict] = None,
               warn_only: bool = False) -> VerificationResult:
        """Attach a verification to a step and log failures."""
        if passed:
            status = VerificationStatus.PASSED
        else:
            status = VerificationStatus.WARNING if warn_only else VerificationStatus.FAILED
        result = VerificationResult(name=name, status=status, message=message, details=details)
        step.verifications.append(result)
        if not passed:
            self.log(f"{name}: {message}", "WARNING" if warn_only else "ERROR")
        return result

    def require(self, path: Path, producer: str) -> Path:
        """
        Raises:
            MissingArtifactError: the upstream artifact does not exist
        """
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return path

    def save_results(self, data: Any, filename: str, subfolder: Optional[str] = None) -> str:
        """
        Save results as YAML (.yaml/.yml) or JSON.

        Args:
            data: Data to save
            filename: Output filename (without path)
            subfolder: Optional subfolder within output_dir

        Returns:
            Absolute path of the written file
        """
        output_path = self.output_dir / subfolder if subfolder else self.output_dir
        filepath = output_path / filename
        if filepath.suffix in (".yaml", ".yml"):
            saved = save_yaml(data, str(filepath))
        else:
            saved = save_json(data, str(filepath))
        self.log(f"Saved results to: {filepath}", "SUCCESS")
        return saved

    # ==================== Abstract Methods ====================

    @property
    @abstractmethod
    def name(self) -> str:
        """Workflow name."""
        pass

    @abstractmethod
    def run(self, **kwargs) -> WorkflowResult:
        """
        Execute the workflow.

        Returns:
            WorkflowResult with complete execution details
        """
        pass

    # ==================== Helper Methods ====================

    def _create_workflow_result(
        self,
        success: bool,
        start_time: datetime,
        summary: Dict,
        output_files: List[str]
    ) -> WorkflowResult:
        """Create a WorkflowResult object."""
        end_time = datetime.now()
        return WorkflowResult(
            workflow_name=self.name,
            success=success,
            start_time=start_time.isoformat(),
            end_time=end_time.isoformat(),
            total_duration_ms=int((end_time - start_time).total_seconds() * 1000),
            steps=self._steps,
            summary=summary,
            output_files=output_files,
            errors=self._errors
        )

    def _add_step(self, step: StepResult):
        """Add a step result to tracking."""
        self._steps.append(step)
        if not step.success and step.error:
            self._errors.append(f"{step.step_name}: {step.error}")
