"""
Full-precision denoiser training on the synthetic shapes data.
"""

from dataclasses import dataclass
from typing import Any, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from shared.utils import derive_seed, log

from .denoiser import DenoiserModel
from .diffcore import NoiseSchedule, q_sample
from .toy_data import SyntheticShapes


class ConvergenceError(RuntimeError):
    """FP training ended above its loss or feature-distance target."""

    def __init__(self, history: List[float], target: float, metric: str = "final epoch loss",
                 value: Optional[float] = None):
        self.history = list(history)
        self.target = target
        self.metric = metric
        if value is None:
            value = self.history[-1] if self.history else float("nan")
        self.value = value
        super().__init__(f"FP training did not converge: {metric} {value:.4f} > target {target}")


@dataclass
class FPTrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 100
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1
    grad_clip: float = 1.0
    target_loss: Optional[float] = 0.35

    @classmethod
    def from_config(cls, fp_train: Mapping[str, Any]) -> "FPTrainConfig":
        target = fp_train.get("target_loss")
        return cls(
            epochs=int(fp_train["epochs"]),
            steps_per_epoch=int(fp_train["steps_per_epoch"]),
            batch_size=int(fp_train["batch_size"]),
            lr=float(fp_train["lr"]),
            cond_dropout=float(fp_train["cond_dropout"]),
            grad_clip=float(fp_train["grad_clip"]),
            target_loss=float(target) if target is not None else None,
        )


def _noisy_batch(
    data: SyntheticShapes,
    sched: NoiseSchedule,
    n: int,
    generator: torch.Generator,
    cond_dropout: float,
    null_class: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    x0, class_ids = data.sample(n, generator)
    if cond_dropout > 0:
        drop = torch.rand((n,), generator=generator) < cond_dropout
        class_ids = torch.where(drop, torch.full_like(class_ids, null_class), class_ids)
    t = torch.randint(0, sched.T, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    return q_sample(x0, t, eps, sched), t, class_ids, eps


def train_fp(
    model: DenoiserModel,
    data: SyntheticShapes,
    sched: NoiseSchedule,
    cfg: FPTrainConfig,
    seed: int = 0,
    verbose: bool = False,
) -> Tuple[DenoiserModel, List[float]]:
    """
    Train the noise predictor with eps-MSE and condition dropout.

    Returns:
        (model in eval mode, per-epoch mean losses)

    Raises:
        ConvergenceError: final epoch loss above cfg.target_loss
    """
    generator = torch.Generator().manual_seed(derive_seed(seed, "fp_train"))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    history: List[float] = []

    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for _ in tqdm(range(cfg.steps_per_epoch), desc=f"fp epoch {epoch}", disable=not verbose, leave=False):
            x_t, t, class_ids, eps = _noisy_batch(
                data, sched, cfg.batch_size, generator, cfg.cond_dropout, model.null_class
            )
            loss = F.mse_loss(model(x_t, t, class_ids), eps)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            total += float(loss)
        history.append(total / max(cfg.steps_per_epoch, 1))
        log(f"FP epoch {epoch}/{cfg.epochs}: loss={history[-1]:.4f}", "INFO", verbose)

    model.eval()
    model.schedule_fingerprint = sched.fingerprint()
    if cfg.target_loss is not None and history and history[-1] > cfg.target_loss:
        raise ConvergenceError(history, cfg.target_loss)
    return model, history


@torch.no_grad()
def noise_prediction_mse(
    model,
    data: SyntheticShapes,
    sched: NoiseSchedule,
    n: int = 512,
    seed: int = 0,
) -> float:
    """Held-out eps-MSE over uniformly drawn timesteps."""
    generator = torch.Generator().manual_seed(derive_seed(seed, "fp_holdout"))
    x_t, t, class_ids, eps = _noisy_batch(data, sched, n, generator, 0.0, model.null_class)
    return float(F.mse_loss(model.predict_noise(x_t, t, class_ids), eps))
