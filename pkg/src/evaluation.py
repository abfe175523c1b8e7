"""
Matched-seed evaluation of a quantized model against its FP teacher.

Both models sample every (condition, seed) pair from the same noise, so
image i of one set is the counterpart of image i of the other.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from torchvision.utils import save_image
from tqdm import tqdm

from shared.utils import fingerprint_payload, save_yaml

from .artifact_io import FingerprintMismatchError
from .diffcore import Condition, NoisePredictor, NoiseSchedule, sample_batch
from .metrics import (
    FeatureExtractor,
    extract_features,
    frechet_from_features,
    perceptual_feature_distance_batch,
    ssim_batch,
)
from .toy_data import to_unit_range


SUBSTITUTION_NOTICE = (
    "Metric substitution: fd_fp and fd_data are Fréchet distances over features of an in-repo CNN "
    "trained on the synthetic shapes (not InceptionV3 FID); pfd is a normalized feature distance over "
    "the same network (not LPIPS). Values are comparable only within this project."
)


@dataclass
class MetricReport:
    label: str
    fd_fp: float
    ssim_mean: float
    pfd_mean: float
    fd_data: Optional[float]
    num_images: int
    seed_set: Dict[str, Any]
    per_condition: Dict[int, Dict[str, float]] = field(default_factory=dict)
    fingerprints: Dict[str, Optional[str]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    substitution_notice: str = SUBSTITUTION_NOTICE

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["per_condition"] = {int(k): v for k, v in self.per_condition.items()}
        return data

    def row(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "fd_fp": self.fd_fp,
            "ssim": self.ssim_mean,
            "pfd": self.pfd_mean,
            "fd_data": self.fd_data,
            "n": self.num_images,
        }


@torch.no_grad()
def generate_images(
    model: NoisePredictor,
    conditions: Sequence[Condition],
    sched: NoiseSchedule,
    guidance_scale: Optional[float] = None,
    batch_size: int = 128,
    verbose: bool = False,
) -> torch.Tensor:
    """Final samples in [-1, 1], one per condition, in condition order."""
    chunks = []
    for start in tqdm(range(0, len(conditions), batch_size), desc="sampling", disable=not verbose):
        group = conditions[start:start + batch_size]
        chunks.append(sample_batch(
            model, [c.class_id for c in group], [c.seed for c in group], sched, guidance_scale
        ))
    return torch.cat(chunks)


def _check_schedules(q_model, fp_model, sched: NoiseSchedule):
    expected = sched.fingerprint()
    for name, model in (("quantized", q_model), ("fp", fp_model)):
        fingerprint = getattr(model, "schedule_fingerprint", None)
        if fingerprint is not None and fingerprint != expected:
            raise FingerprintMismatchError(
                f"The {name} model was trained with schedule {fingerprint}, evaluation uses {expected}"
            )


def evaluate_pair(
    q_model: NoisePredictor,
    fp_model: NoisePredictor,
    conditions: Sequence[Condition],
    sched: NoiseSchedule,
    fx: FeatureExtractor,
    guidance_scale: Optional[float] = None,
    batch_size: int = 128,
    shrinkage: float = 1e-6,
    pfd_layers: Sequence[int] = (0, 1, 2),
    reference_images: Optional[torch.Tensor] = None,
    fp_images: Optional[torch.Tensor] = None,
    label: str = "",
    verbose: bool = False,
) -> MetricReport:
    """
    Generate aligned image sets and compute FD-FP, SSIM, PFD (and FD to
    real data when reference images are given).

    Args:
        fp_images: Precomputed FP samples for the same conditions

    Raises:
        FingerprintMismatchError: a model was trained with another schedule
    """
    _check_schedules(q_model, fp_model, sched)
    conditions = list(conditions)
    if fp_images is None:
        fp_images = generate_images(fp_model, conditions, sched, guidance_scale, batch_size, verbose)
    q_images = generate_images(q_model, conditions, sched, guidance_scale, batch_size, verbose)
    if fp_images.shape != q_images.shape:
        raise ValueError(f"FP image set {tuple(fp_images.shape)} does not match {tuple(q_images.shape)}")

    q_unit, fp_unit = to_unit_range(q_images), to_unit_range(fp_images)
    ssim_values = ssim_batch(q_unit, fp_unit)
    pfd_values = perceptual_feature_distance_batch(q_unit, fp_unit, fx, pfd_layers)
    q_features = extract_features(q_unit, fx)
    fd_fp = frechet_from_features(q_features, extract_features(fp_unit, fx), shrinkage)
    fd_data = None
    if reference_images is not None:
        fd_data = frechet_from_features(q_features, extract_features(to_unit_range(reference_images), fx), shrinkage)

    class_ids = np.array([c.class_id for c in conditions])
    per_condition = {}
    for class_id in np.unique(class_ids):
        rows = torch.from_numpy(class_ids == class_id)
        per_condition[int(class_id)] = {
            "count": int(rows.sum()),
            "ssim": float(ssim_values[rows].mean()),
            "pfd": float(pfd_values[rows].mean()),
        }

    seeds = [c.seed for c in conditions]
    return MetricReport(
        label=label,
        fd_fp=fd_fp,
        ssim_mean=float(ssim_values.mean()),
        pfd_mean=float(pfd_values.mean()),
        fd_data=fd_data,
        num_images=len(conditions),
        seed_set={"count": len(seeds), "first": seeds[0] if seeds else None, "hash": fingerprint_payload(seeds)},
        per_condition=per_condition,
        fingerprints={
            "quantized_model": q_model.reference_fingerprint() if hasattr(q_model, "reference_fingerprint") else None,
            "fp_model": fp_model.reference_fingerprint() if hasattr(fp_model, "reference_fingerprint") else None,
            "schedule": sched.fingerprint(),
            "feature_extractor": fx.fingerprint(),
        },
        config={"guidance_scale": guidance_scale, "shrinkage": shrinkage, "pfd_layers": list(pfd_layers)},
    )


# =============================================================================
# REPORT OUTPUT
# =============================================================================

def _format(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def markdown_table(rows: List[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> str:
    if not rows:
        return "_no rows_\n"
    columns = list(columns or rows[0].keys())
    lines = [
        "| " + " | ".join(columns) + " |",
        "|" + "|".join("---" for _ in columns) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(_format(row.get(c)) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, path: Path) -> Path:
    """Write the report as YAML plus a Markdown rendering next to it."""
    path = Path(path)
    save_yaml(report.to_dict(), str(path))
    md = [f"# Evaluation: {report.label or 'quantized vs FP'}", "", f"> {report.substitution_notice}", ""]
    md.append(markdown_table([report.row()]))
    md.append("## Per condition\n")
    md.append(markdown_table(
        [{"class": k, **v} for k, v in sorted(report.per_condition.items())], ["class", "count", "ssim", "pfd"]
    ))
    path.with_suffix(".md").write_text("\n".join(md), encoding="utf-8")
    return path


def save_grid(images: torch.Tensor, path: Path, nrow: int = 8) -> Path:
    """PNG grid of [-1, 1] images."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(to_unit_range(images), str(path), nrow=nrow, padding=1)
    return path
