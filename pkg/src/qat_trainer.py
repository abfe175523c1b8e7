"""
Quantization-aware fine-tuning under the three data pipelines.

serial:   batches follow consecutive denoising steps generated on the fly by
          the FP model, all chains in a batch sharing one timestep.
parallel: clean synthetic samples noised to uniformly drawn timesteps.
s2p:      records drawn from a precomputed serial latent dataset, uniformly
          without replacement per epoch, so one batch mixes many timesteps.

Every pipeline minimizes L_out + L_sen against the FP teacher and runs the
same optimizer, stability tracking and logging.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import torch
from tqdm import tqdm

from shared.utils import derive_seed, log as console_log

from .artifact_io import FingerprintMismatchError
from .diffcore import NoisePredictor, NoiseSchedule, guided_noise, reverse_step_batch
from .distill import (
    SensitiveLayerSet,
    capture_features,
    loss_output,
    loss_sensitive,
    select_sensitive_layers,
    total_loss,
)
from .latent_dataset import LatentBatch, LatentDataset, generate_parallel_batch
from .quant_model import QuantizedModel
from .stability import (
    FreezeMask,
    GradStats,
    OscillationTracker,
    apply_selective_freeze,
    oscillation_fraction,
)
from .toy_data import SyntheticShapes
from .train_log import OperationTimer, TrainLog


class PipelineMode(str, Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"
    S2P = "s2p"

    @classmethod
    def parse(cls, value: "str | PipelineMode") -> "PipelineMode":
        if isinstance(value, cls):
            return value
        text = str(value).lower()
        if text == "serial_to_parallel":
            return cls.S2P
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"Unknown pipeline mode {value!r}; expected serial, parallel or s2p") from None


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite or exceeded the divergence bound."""

    def __init__(self, iteration: int, recent_losses: Sequence[float], reason: str):
        self.iteration = iteration
        self.recent_losses = list(recent_losses)
        super().__init__(
            f"Training diverged at iteration {iteration}: {reason}; recent losses: "
            f"{[round(x, 6) for x in self.recent_losses]}"
        )


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass
class QATConfig:
    iterations: int = 2000
    batch_size: int = 32
    lr_weight: float = 1e-5
    lr_scale: float = 1e-4
    log_every: int = 100
    max_loss: float = 1e4
    seed: int = 0

    @classmethod
    def from_config(cls, qat: Mapping[str, Any], seed: int = 0) -> "QATConfig":
        return cls(
            iterations=int(qat["iterations"]),
            batch_size=int(qat["batch_size"]),
            lr_weight=float(qat["lr_weight"]),
            lr_scale=float(qat["lr_scale"]),
            log_every=int(qat["log_every"]),
            max_loss=float(qat["max_loss"]),
            seed=seed,
        )


@dataclass
class DistillConfig:
    enabled: bool = True
    sensitive_profile: str = "unet"

    @classmethod
    def from_config(cls, distill: Mapping[str, Any]) -> "DistillConfig":
        return cls(enabled=bool(distill["enabled"]), sensitive_profile=str(distill["sensitive_profile"]))


@dataclass
class StabilityConfig:
    enabled: bool = True
    freeze: bool = True
    track_scope: str = "sensitive"
    every: int = 500
    threshold: float = 0.1
    momentum: float = 0.1
    grad_window: int = 200

    def __post_init__(self):
        if self.track_scope not in ("sensitive", "all"):
            raise ValueError(f"track_scope must be 'sensitive' or 'all', got {self.track_scope!r}")
        if self.every <= 0:
            raise ValueError(f"every must be positive, got {self.every}")

    @classmethod
    def from_config(cls, stability: Mapping[str, Any]) -> "StabilityConfig":
        return cls(
            enabled=bool(stability["enabled"]),
            freeze=bool(stability["freeze"]),
            track_scope=str(stability["track_scope"]),
            every=int(stability["every"]),
            threshold=float(stability["threshold"]),
            momentum=float(stability["momentum"]),
            grad_window=int(stability["grad_window"]),
        )


# =============================================================================
# BATCH SOURCES
# =============================================================================

class S2PBatchSource:
    """Uniform record sampling without replacement, reshuffled every epoch."""

    def __init__(self, dataset: LatentDataset, batch_size: int, seed: int):
        if len(dataset) == 0:
            raise ValueError("Latent dataset is empty")
        self.dataset = dataset
        self.batch_size = min(batch_size, len(dataset))
        self.generator = torch.Generator().manual_seed(derive_seed(seed, "s2p"))
        self._order = torch.empty(0, dtype=torch.long)
        self._cursor = 0

    def next(self) -> LatentBatch:
        if self._cursor + self.batch_size > len(self._order):
            self._order = torch.randperm(len(self.dataset), generator=self.generator)
            self._cursor = 0
        indices = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.dataset.batch(indices.numpy())


class SerialBatchSource:
    """
    Denoising chains advanced one FP reverse step per batch.

    All chains share the current timestep; after consuming t = 0 a fresh set
    of chains starts from Gaussian noise at T - 1.
    """

    def __init__(
        self,
        fp_model: NoisePredictor,
        sched: NoiseSchedule,
        num_classes: int,
        batch_size: int,
        seed: int,
        guidance_scale: Optional[float] = None,
    ):
        self.fp_model = fp_model
        self.sched = sched
        self.num_classes = num_classes
        self.batch_size = batch_size
        self.guidance_scale = guidance_scale
        self.generator = torch.Generator().manual_seed(derive_seed(seed, "serial"))
        self._restart()

    def _restart(self):
        shape = (self.batch_size, *self.fp_model.latent_shape)
        self.x = torch.randn(shape, generator=self.generator)
        self.class_ids = torch.randint(0, self.num_classes, (self.batch_size,), generator=self.generator)
        self.t_value = self.sched.T - 1

    @torch.no_grad()
    def next(self) -> LatentBatch:
        t = torch.full((self.batch_size,), self.t_value, dtype=torch.long)
        batch = LatentBatch(x=self.x.clone(), t=t, class_ids=self.class_ids.clone())
        if self.t_value == 0:
            self._restart()
        else:
            eps = guided_noise(self.fp_model, self.x, t, self.class_ids, self.guidance_scale)
            z = torch.randn(self.x.shape, generator=self.generator)
            self.x = reverse_step_batch(self.x, eps, t, z, self.sched)
            self.t_value -= 1
        return batch


class ParallelBatchSource:
    """Synthetic clean samples noised to uniformly drawn timesteps."""

    def __init__(self, data: SyntheticShapes, sched: NoiseSchedule, batch_size: int, seed: int):
        self.data = data
        self.sched = sched
        self.batch_size = batch_size
        self.seed = seed
        self.generator = torch.Generator().manual_seed(derive_seed(seed, "parallel"))
        self.step = 0

    def next(self) -> LatentBatch:
        x0, class_ids = self.data.sample(self.batch_size, self.generator)
        t = torch.randint(0, self.sched.T, (self.batch_size,), generator=self.generator)
        self.step += 1
        return generate_parallel_batch(
            x0, t, self.sched, derive_seed(self.seed, "noise", self.step), class_ids=class_ids
        )


def make_batch_source(
    mode: PipelineMode,
    qat_cfg: QATConfig,
    dataset: Optional[LatentDataset] = None,
    fp_model: Optional[NoisePredictor] = None,
    sched: Optional[NoiseSchedule] = None,
    data: Optional[SyntheticShapes] = None,
    guidance_scale: Optional[float] = None,
):
    """
    Raises:
        ValueError: an input the mode needs is missing
    """
    if mode is PipelineMode.S2P:
        if dataset is None:
            raise ValueError("s2p mode needs a latent dataset")
        return S2PBatchSource(dataset, qat_cfg.batch_size, qat_cfg.seed)
    if sched is None:
        raise ValueError(f"{mode.value} mode needs the noise schedule")
    if mode is PipelineMode.SERIAL:
        num_classes = data.num_classes if data is not None else fp_model.null_class
        return SerialBatchSource(fp_model, sched, num_classes, qat_cfg.batch_size, qat_cfg.seed, guidance_scale)
    if data is None:
        raise ValueError("parallel mode needs the synthetic data generator")
    return ParallelBatchSource(data, sched, qat_cfg.batch_size, qat_cfg.seed)


# =============================================================================
# TRAINING
# =============================================================================

def tracked_layers(q_model: QuantizedModel, sensitive: SensitiveLayerSet, scope: str) -> List[str]:
    if scope == "all":
        return list(q_model.quant_layers())
    return [name for name in sensitive if name in q_model.quant_layers()]


def _check_lineage(q_model: QuantizedModel, fp_model, dataset: Optional[LatentDataset], sched):
    if q_model.reference_fingerprint() != fp_model.reference_fingerprint():
        raise FingerprintMismatchError(
            f"Quantized model derives from {q_model.reference_fingerprint()}, "
            f"teacher is {fp_model.reference_fingerprint()}"
        )
    if dataset is not None:
        dataset.check_compatible(fp_model.reference_fingerprint(), sched.fingerprint() if sched else None)


def train_qat(
    q_model: QuantizedModel,
    fp_model,
    dataset: Optional[LatentDataset],
    mode: PipelineMode,
    distill_cfg: DistillConfig,
    stability_cfg: StabilityConfig,
    qat_cfg: QATConfig,
    sched: Optional[NoiseSchedule] = None,
    data: Optional[SyntheticShapes] = None,
    guidance_scale: Optional[float] = None,
    train_log: Optional[TrainLog] = None,
    callback: Optional[Callable[[int, QuantizedModel, TrainLog], None]] = None,
    verbose: bool = False,
):
    """
    Fine-tune a quantized model against the FP teacher.

    Args:
        q_model: Calibrated quantized model (time cache bound when stripped)
        fp_model: FP teacher, normally the stripped model with its cache
        dataset: Serial latent dataset (required for s2p)
        mode: Data pipeline
        distill_cfg: Sensitive-layer distillation switch and profile
        stability_cfg: Oscillation tracking and freezing settings
        qat_cfg: Optimizer settings and iteration budget
        sched: Noise schedule (required for serial and parallel)
        data: Synthetic data generator (required for parallel)
        guidance_scale: CFG weight for on-the-fly serial chains
        train_log: Log to append to (in-memory one created when None)
        callback: Called as callback(iteration, q_model, log) after each step

    Returns:
        (q_model, TrainLog). The log also carries tracker, freeze_mask,
        grad_stats and timings attributes.

    Raises:
        FingerprintMismatchError: teacher, student and dataset lineage differ
        TrainingDivergedError: non-finite or exploding loss
    """
    mode = PipelineMode.parse(mode)
    train_log = train_log if train_log is not None else TrainLog()
    sensitive = select_sensitive_layers(fp_model, distill_cfg.sensitive_profile)
    distill_layers = sensitive if distill_cfg.enabled else SensitiveLayerSet(())
    tracked = tracked_layers(q_model, sensitive, stability_cfg.track_scope)

    tracker = OscillationTracker(momentum=stability_cfg.momentum)
    freeze_mask = FreezeMask()
    grad_stats = GradStats()
    timings = {"train_ms": 0.0, "stability_ms": 0.0}
    train_log.tracker = tracker
    train_log.freeze_mask = freeze_mask
    train_log.grad_stats = grad_stats
    train_log.timings = timings
    train_log.tracked_layers = tracked

    if qat_cfg.iterations == 0:
        return q_model, train_log

    _check_lineage(q_model, fp_model, dataset if mode is PipelineMode.S2P else None, sched)
    source = make_batch_source(mode, qat_cfg, dataset, fp_model, sched, data, guidance_scale)

    fp_model.eval()
    q_model.train()
    optimizers = [
        torch.optim.Adam(q_model.network_parameters(), lr=qat_cfg.lr_weight),
        torch.optim.Adam(q_model.weight_scale_parameters(), lr=qat_cfg.lr_scale),
        torch.optim.SparseAdam(q_model.bank_parameters(), lr=qat_cfg.lr_scale),
    ]
    quant_layers = q_model.quant_layers()
    recent: List[float] = []

    for iteration in tqdm(range(1, qat_cfg.iterations + 1), desc=f"qat[{mode.value}]", disable=not verbose):
        with OperationTimer() as step_timer:
            batch = source.next()
            with torch.no_grad(), capture_features(fp_model, distill_layers) as cap_fp:
                eps_fp = fp_model.predict_noise(batch.x, batch.t, batch.class_ids)
            with capture_features(q_model.model, distill_layers) as cap_q:
                eps_q = q_model.predict_noise(batch.x, batch.t, batch.class_ids)

            l_out = loss_output(eps_fp, eps_q)
            l_sen = loss_sensitive(cap_fp, cap_q, distill_layers)
            try:
                loss = total_loss(l_out, l_sen)
            except FloatingPointError as e:
                raise TrainingDivergedError(iteration, recent[-10:], str(e)) from e
            if float(loss) > qat_cfg.max_loss:
                raise TrainingDivergedError(iteration, recent[-10:], f"loss {float(loss):.4g} above {qat_cfg.max_loss}")
            recent.append(float(loss))

            for optimizer in optimizers:
                optimizer.zero_grad(set_to_none=True)
            loss.backward()

            grad_norm, flip_rate = {}, {}
            for name, layer in quant_layers.items():
                if layer.weight.grad is None:
                    continue
                grad_stats.record(name, layer.weight.grad)
                grad_norm[name] = grad_stats.norms[name][-1]
                flip_rate[name] = grad_stats.flip_rates[name][-1]

            for optimizer in optimizers:
                optimizer.step()
            q_model.restore_frozen()
        timings["train_ms"] += step_timer.get_duration()

        freeze_events = []
        if stability_cfg.enabled:
            with OperationTimer() as stability_timer:
                tracker.observe({name: quant_layers[name].weight_quant.codes(quant_layers[name].weight) for name in tracked})
                if stability_cfg.freeze:
                    before = len(freeze_mask.events)
                    apply_selective_freeze(
                        tracker, freeze_mask, sensitive, every=stability_cfg.every, threshold=stability_cfg.threshold
                    )
                    if len(freeze_mask.events) > before:
                        q_model.apply_freeze(freeze_mask)
                        freeze_events = freeze_mask.events[before:]
            timings["stability_ms"] += stability_timer.get_duration()

        entry = {
            "loss": float(loss),
            "l_out": float(l_out),
            "l_sen": float(l_sen),
            "timesteps": len(torch.unique(batch.t)),
            "grad_norm": grad_norm,
            "flip_rate": flip_rate,
        }
        if freeze_events:
            entry["freeze_events"] = freeze_events
            entry["frozen"] = freeze_mask.count()
        is_report_step = iteration % max(qat_cfg.log_every, 1) == 0 or iteration == qat_cfg.iterations
        if is_report_step and stability_cfg.enabled:
            entry["oscillation_pct"] = oscillation_fraction(tracker, stability_cfg.threshold)
        train_log.record(iteration, **entry)
        if is_report_step:
            console_log(
                f"[{mode.value}] iter {iteration}/{qat_cfg.iterations} loss={float(loss):.5f} "
                f"l_out={float(l_out):.5f} l_sen={float(l_sen):.5f}",
                "INFO",
                verbose,
            )
        if callback is not None:
            callback(iteration, q_model, train_log)

    q_model.eval()
    train_log.summary = {
        "mode": mode.value,
        "iterations": qat_cfg.iterations,
        "final_loss": recent[-1],
        "oscillation_pct": oscillation_fraction(tracker, stability_cfg.threshold) if stability_cfg.enabled else None,
        "frozen_weights": freeze_mask.count(),
        "train_ms": timings["train_ms"],
        "stability_ms": timings["stability_ms"],
    }
    return q_model, train_log


@torch.no_grad()
def evaluate_loss(
    q_model: QuantizedModel,
    fp_model,
    dataset: LatentDataset,
    batch_size: int = 128,
) -> float:
    """Mean L_out of the quantized model over every record of a dataset."""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    was_training = q_model.training
    q_model.eval()
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.batch(range(start, min(start + batch_size, len(dataset))))
        eps_fp = fp_model.predict_noise(batch.x, batch.t, batch.class_ids)
        eps_q = q_model.predict_noise(batch.x, batch.t, batch.class_ids)
        total += float(loss_output(eps_fp, eps_q)) * len(batch)
    q_model.train(was_training)
    return total / len(dataset)
