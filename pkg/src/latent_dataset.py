"""
Latent datasets for quantization-aware fine-tuning.

Serial generation runs full FP inference per condition and keeps a random
subset of the intermediate latents; the parallel baseline noises clean
samples to random timesteps in closed form. Records are fixed-size
(t: uint16, cond: uint16, seed: uint64, x: float32) and stored in one
`latents` artifact.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from shared.utils import derive_seed, fingerprint_payload

from .artifact_io import FingerprintMismatchError, read_artifact, write_artifact
from .diffcore import (
    Condition,
    LatentTensor,
    NoisePredictor,
    NoiseSchedule,
    item_noise,
    q_sample,
    sample_batch,
)


def record_dtype(latent_shape: Sequence[int]) -> np.dtype:
    return np.dtype([("t", "<u2"), ("cond", "<u2"), ("seed", "<u8"), ("x", "<f4", tuple(latent_shape))])


def make_conditions(n: int, num_classes: int, seed: int) -> List[Condition]:
    """n conditions with seeded class ids and per-condition trajectory seeds."""
    rng = np.random.default_rng(derive_seed(seed, "classes"))
    class_ids = rng.integers(0, num_classes, size=n)
    return [Condition(int(c), seed=derive_seed(seed, "condition", i)) for i, c in enumerate(class_ids)]


def sampler_hash(sched: NoiseSchedule, guidance_scale: Optional[float]) -> str:
    return fingerprint_payload({
        "sampler": "ancestral",
        "schedule": sched.fingerprint(),
        "guidance_scale": guidance_scale,
    })


# =============================================================================
# RECORDS
# =============================================================================

@dataclass
class LatentRecord:
    x_t: LatentTensor
    t: int
    cond: Condition
    sampler_hash: str = ""

    def __post_init__(self):
        if self.x_t.timestep_tag != self.t:
            raise ValueError(f"latent tagged {self.x_t.timestep_tag} stored as timestep {self.t}")


@dataclass
class LatentBatch:
    """A training batch: noisy latents, their timesteps and class ids."""
    x: torch.Tensor
    t: torch.Tensor
    class_ids: torch.Tensor
    eps: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.x.shape[0]


class LatentDataset:
    """Append-only record array with a timestep index and a provenance header."""

    def __init__(self, records: np.ndarray, header: Dict[str, Any]):
        self.header = dict(header)
        self.latent_shape = tuple(int(s) for s in header["latent_shape"])
        expected = record_dtype(self.latent_shape)
        if records.dtype != expected:
            raise ValueError(f"record dtype {records.dtype} does not match {expected}")
        self.records = records
        self._index: Optional[Dict[int, np.ndarray]] = None

    @classmethod
    def empty(cls, header: Dict[str, Any]) -> "LatentDataset":
        return cls(np.zeros(0, dtype=record_dtype(header["latent_shape"])), header)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def T(self) -> int:
        return int(self.header["T"])

    def append(self, records: np.ndarray):
        self.records = np.concatenate([self.records, records.astype(self.records.dtype)])
        self._index = None

    def record(self, i: int) -> LatentRecord:
        row = self.records[i]
        t = int(row["t"])
        return LatentRecord(
            x_t=LatentTensor(torch.from_numpy(np.array(row["x"])), timestep_tag=t),
            t=t,
            cond=Condition(int(row["cond"]), seed=int(row["seed"])),
            sampler_hash=self.header.get("sampler_hash", ""),
        )

    def by_timestep(self) -> Dict[int, np.ndarray]:
        """Record indices per timestep."""
        if self._index is None:
            ts = self.records["t"].astype(np.int64)
            self._index = {int(t): np.flatnonzero(ts == t) for t in np.unique(ts)}
        return self._index

    def coverage_report(self) -> Dict[str, Any]:
        counts = {t: len(idx) for t, idx in self.by_timestep().items()}
        missing = [t for t in range(self.T) if t not in counts]
        return {
            "T": self.T,
            "records": len(self),
            "covered_timesteps": len(counts),
            "missing_timesteps": missing,
            "min_per_timestep": min(counts.values()) if counts else 0,
            "max_per_timestep": max(counts.values()) if counts else 0,
        }

    def batch(self, indices: Sequence[int]) -> LatentBatch:
        rows = self.records[np.asarray(indices, dtype=np.int64)]
        return LatentBatch(
            x=torch.from_numpy(np.ascontiguousarray(rows["x"])),
            t=torch.from_numpy(rows["t"].astype(np.int64)),
            class_ids=torch.from_numpy(rows["cond"].astype(np.int64)),
        )

    def nbytes(self) -> int:
        return int(self.records.nbytes)

    def check_compatible(self, model_fingerprint: str, schedule_fingerprint: Optional[str] = None):
        """
        Raises:
            FingerprintMismatchError: dataset generated by another model or schedule
        """
        if self.header.get("model_fingerprint") != model_fingerprint:
            raise FingerprintMismatchError(
                f"Dataset generated by model {self.header.get('model_fingerprint')}, got {model_fingerprint}"
            )
        if schedule_fingerprint is not None and self.header.get("schedule_fingerprint") != schedule_fingerprint:
            raise FingerprintMismatchError(
                f"Dataset generated with schedule {self.header.get('schedule_fingerprint')}, "
                f"got {schedule_fingerprint}"
            )

    def save(self, path: Path) -> Path:
        header = dict(self.header)
        header["count"] = len(self)
        header["record_bytes"] = self.records.dtype.itemsize
        return write_artifact(path, "latents", header, self.records.tobytes())

    @classmethod
    def load(cls, path: Path) -> "LatentDataset":
        header, payload = read_artifact(path, "latents")
        dtype = record_dtype(header["latent_shape"])
        records = np.frombuffer(payload, dtype=dtype, count=int(header["count"])).copy()
        return cls(records, header)


# =============================================================================
# GENERATION
# =============================================================================

def _pick_timesteps(T: int, steps_per_prompt: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(T, size=steps_per_prompt, replace=False))[::-1]


def generate_serial_dataset(
    fp_model: NoisePredictor,
    conditions: Sequence[Condition],
    steps_per_prompt: int,
    sched: NoiseSchedule,
    seed: int,
    guidance_scale: Optional[float] = None,
    batch_size: int = 128,
    model_fingerprint: Optional[str] = None,
    verbose: bool = False,
) -> LatentDataset:
    """
    Run FP inference per condition and keep `steps_per_prompt` of its
    intermediate latents, chosen uniformly without replacement.

    Records are ordered by condition, then by descending timestep.

    Raises:
        ValueError: steps_per_prompt outside [1, T]
    """
    T = sched.T
    if not 1 <= steps_per_prompt <= T:
        raise ValueError(f"steps_per_prompt must be in [1, {T}], got {steps_per_prompt}")

    shape = tuple(fp_model.latent_shape)
    dtype = record_dtype(shape)
    fingerprint = model_fingerprint or fp_model.reference_fingerprint()
    header = {
        "T": T,
        "latent_shape": list(shape),
        "model_fingerprint": fingerprint,
        "schedule_fingerprint": sched.fingerprint(),
        "sampler_hash": sampler_hash(sched, guidance_scale),
        "policy": {
            "mode": "serial",
            "num_conditions": len(conditions),
            "steps_per_prompt": steps_per_prompt,
            "guidance_scale": guidance_scale,
            "seed": seed,
            "batch_size": batch_size,
        },
    }

    chunks = []
    starts = range(0, len(conditions), batch_size)
    for start in tqdm(starts, desc="serial latents", disable=not verbose):
        group = conditions[start:start + batch_size]
        chain = sample_batch(
            fp_model,
            [c.class_id for c in group],
            [c.seed for c in group],
            sched,
            guidance_scale,
            keep_trajectory=True,
        )
        rows = np.zeros(len(group) * steps_per_prompt, dtype=dtype)
        for j, cond in enumerate(group):
            picked = _pick_timesteps(T, steps_per_prompt, derive_seed(seed, "timesteps", cond.seed))
            block = rows[j * steps_per_prompt:(j + 1) * steps_per_prompt]
            block["t"] = picked
            block["cond"] = cond.class_id
            block["seed"] = cond.seed
            # Chain row k holds the latent consumed at step T-1-k.
            block["x"] = chain[torch.as_tensor((T - 1 - picked).copy()), j].numpy()
        chunks.append(rows)

    records = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
    return LatentDataset(records, header)


def generate_parallel_batch(
    x0_batch: torch.Tensor,
    t_batch: torch.Tensor,
    sched: NoiseSchedule,
    seed: int,
    class_ids: Optional[torch.Tensor] = None,
) -> LatentBatch:
    """Noise clean samples to the given timesteps in closed form."""
    if x0_batch.dim() != 4 or t_batch.shape != (x0_batch.shape[0],):
        raise ValueError(
            f"Expected x0 (B, C, H, W) and t (B,), got {tuple(x0_batch.shape)} and {tuple(t_batch.shape)}"
        )
    generator = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(x0_batch.shape, generator=generator)
    x_t = q_sample(x0_batch, t_batch, eps, sched)
    if class_ids is None:
        class_ids = torch.zeros(x0_batch.shape[0], dtype=torch.long)
    return LatentBatch(x=x_t, t=t_batch.long(), class_ids=class_ids.long(), eps=eps)


# =============================================================================
# LATENT RANGE ANALYSIS
# =============================================================================

@dataclass
class LatentRangeReport:
    """
    Per-timestep statistics of forward-noised latents (a) against inference
    latents (b) that share one initial noise.
    """
    rows: List[Dict[str, float]] = field(default_factory=list)
    eps_mse: float = 0.0
    low_confidence: bool = False
    samples: int = 0

    def deltas(self) -> Dict[int, float]:
        return {int(r["t"]): r["delta"] for r in self.rows}

    def inference_std(self) -> Dict[int, float]:
        return {int(r["t"]): r["std_b"] for r in self.rows}

    def max_delta(self) -> float:
        return max(r["delta"] for r in self.rows) if self.rows else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples": self.samples,
            "eps_mse": self.eps_mse,
            "low_confidence": self.low_confidence,
            "max_delta": self.max_delta(),
            "rows": self.rows,
        }


LOW_CONFIDENCE_MSE = 0.5


def _stats(x: torch.Tensor) -> Tuple[float, float, float]:
    x = x.to(torch.float64)
    return float(x.min()), float(x.max()), float(x.std())


@torch.no_grad()
def latent_range_report(
    fp_model: NoisePredictor,
    sched: NoiseSchedule,
    conditions: Sequence[Condition],
    n: Optional[int] = None,
    guidance_scale: Optional[float] = None,
) -> LatentRangeReport:
    """
    Compare, per timestep, inference latents with the generated sample
    re-noised in closed form using the same initial Gaussian.

    Delta(t) = |std_a(t) - std_b(t)| / std_b(t). The report is flagged low
    confidence when the model's noise-prediction MSE on the re-noised
    latents exceeds 0.5.
    """
    conditions = list(conditions)[: n or len(conditions)]
    T = sched.T
    chain = sample_batch(
        fp_model, [c.class_id for c in conditions], [c.seed for c in conditions], sched,
        guidance_scale, keep_trajectory=True,
    )
    x0 = chain[T]
    eps0 = torch.stack([item_noise(c.seed, T, fp_model.latent_shape)[0] for c in conditions])
    class_ids = torch.tensor([c.class_id for c in conditions], dtype=torch.long)

    rows = []
    mse_total = 0.0
    for t in range(T - 1, -1, -1):
        tt = torch.full((len(conditions),), t, dtype=torch.long)
        noised = q_sample(x0, tt, eps0, sched)
        inference = chain[T - 1 - t]
        min_a, max_a, std_a = _stats(noised)
        min_b, max_b, std_b = _stats(inference)
        rows.append({
            "t": t,
            "min_a": min_a, "max_a": max_a, "std_a": std_a,
            "min_b": min_b, "max_b": max_b, "std_b": std_b,
            "delta": abs(std_a - std_b) / max(std_b, 1e-12),
        })
        pred = fp_model.predict_noise(noised, tt, class_ids)
        mse_total += float(((pred - eps0) ** 2).mean())

    eps_mse = mse_total / T
    return LatentRangeReport(
        rows=rows, eps_mse=eps_mse, low_confidence=eps_mse > LOW_CONFIDENCE_MSE, samples=len(conditions)
    )


def dataset_divergence(dataset: LatentDataset, report: LatentRangeReport) -> Dict[int, float]:
    """Relative std difference between dataset latents and the report's inference latents, per timestep."""
    reference = report.inference_std()
    divergence = {}
    for t, idx in dataset.by_timestep().items():
        if t not in reference:
            continue
        std = float(np.asarray(dataset.records["x"][idx], dtype=np.float64).std())
        divergence[t] = abs(std - reference[t]) / max(reference[t], 1e-12)
    return divergence
