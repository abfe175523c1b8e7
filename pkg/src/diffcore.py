"""
Diffusion core: noise schedule, closed-form forward noising, the ancestral
reverse step and seeded sampling with optional classifier-free guidance.

Timestep convention: t runs over [0, T). The latent consumed by the
denoiser at step t carries timestep_tag t; the initial Gaussian latent is
therefore tagged T-1 and the final clean sample carries no tag.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch

from shared.utils import fingerprint_payload


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear beta schedule with derived alpha, alpha_bar and sigma arrays (float64)."""
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    beta_start: float = 0.0
    beta_end: float = 0.0

    def fingerprint(self) -> str:
        return fingerprint_payload({"T": self.T, "betas": [float(b) for b in self.betas]})

    def to_meta(self) -> Dict[str, object]:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "fingerprint": self.fingerprint(),
        }

    def gather(self, name: str, t: torch.Tensor, ndim: int, dtype=torch.float32) -> torch.Tensor:
        """Index one schedule array by a batch of timesteps, shaped for broadcasting."""
        values = torch.as_tensor(getattr(self, name), dtype=torch.float64)[t.long().cpu()]
        return values.to(dtype=dtype, device=t.device).reshape(-1, *([1] * (ndim - 1)))


@dataclass
class LatentTensor:
    """One latent of shape (channels, height, width) and the step it belongs to."""
    data: torch.Tensor
    timestep_tag: Optional[int] = None

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ValueError(f"LatentTensor expects (C, H, W), got shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("LatentTensor contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Condition:
    """A class id standing in for a prompt, plus the seed its trajectory uses."""
    class_id: int
    seed: int = 0

    def check(self, num_classes: int) -> "Condition":
        if not 0 <= self.class_id < num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {num_classes})")
        return self


class NoisePredictor(Protocol):
    """Anything that predicts noise for a batch: FP, stripped or quantized denoisers."""
    null_class: int
    latent_shape: Tuple[int, int, int]

    def predict_noise(self, x: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        ...


# =============================================================================
# SCHEDULE
# =============================================================================

def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Build a linear beta schedule.

    Args:
        T: Number of timesteps (>= 1)
        beta_start: First beta, in (0, 1)
        beta_end: Last beta, in [beta_start, 1)

    Returns:
        NoiseSchedule with sigmas = sqrt(betas)

    Raises:
        ValueError: T < 1 or betas outside (0, 1) or not ordered
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"Require 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def rescaled_endpoints(beta_start: float, beta_end: float, T: int, reference_T: Optional[int]) -> Tuple[float, float]:
    """
    Scale linear endpoints quoted for a reference chain length to a chain of T steps.

    A short chain with the reference endpoints would stop far from pure noise;
    scaling by reference_T / T keeps the total noise injected comparable.
    """
    if not reference_T:
        return beta_start, beta_end
    factor = reference_T / T
    return beta_start * factor, beta_end * factor


def schedule_from_config(section: Dict[str, object]) -> NoiseSchedule:
    T = int(section["T"])
    start, end = rescaled_endpoints(
        float(section["beta_start"]), float(section["beta_end"]), T, section.get("reference_T")
    )
    return build_schedule(T, start, end)


# =============================================================================
# FORWARD PROCESS
# =============================================================================

def closed_form_noise(x0: torch.Tensor, eps: torch.Tensor, alpha_bar) -> torch.Tensor:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps, broadcasting alpha_bar."""
    alpha_bar = torch.as_tensor(alpha_bar, dtype=x0.dtype, device=x0.device)
    return torch.sqrt(alpha_bar) * x0 + torch.sqrt(1.0 - alpha_bar) * eps


def forward_noise(x0: LatentTensor, t: int, eps: LatentTensor, sched: NoiseSchedule) -> LatentTensor:
    """Noise a clean latent to step t in closed form."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    if not 0 <= t < sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T})")
    x_t = closed_form_noise(x0.data, eps.data, float(sched.alpha_bars[t]))
    return LatentTensor(x_t, timestep_tag=int(t))


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Batched forward noising: x0 (B, C, H, W), t (B,)."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} does not match eps shape {tuple(eps.shape)}")
    alpha_bar = sched.gather("alpha_bars", t, x0.dim(), dtype=x0.dtype)
    return closed_form_noise(x0, eps, alpha_bar)


# =============================================================================
# REVERSE PROCESS
# =============================================================================

def posterior_mean(x_t: torch.Tensor, eps_pred: torch.Tensor, beta, alpha_bar) -> torch.Tensor:
    """(x_t - beta / sqrt(1 - alpha_bar) * eps_pred) / sqrt(1 - beta)."""
    beta = torch.as_tensor(beta, dtype=x_t.dtype, device=x_t.device)
    alpha_bar = torch.as_tensor(alpha_bar, dtype=x_t.dtype, device=x_t.device)
    return (x_t - beta / torch.sqrt(1.0 - alpha_bar) * eps_pred) / torch.sqrt(1.0 - beta)


def reverse_step(
    x_t: LatentTensor,
    eps_pred: LatentTensor,
    t: int,
    z: LatentTensor,
    sched: NoiseSchedule,
) -> LatentTensor:
    """One ancestral step x_t -> x_{t-1}; the result is tagged t-1 (None after t=0)."""
    if not 0 <= t < sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T})")
    if not (x_t.shape == eps_pred.shape == z.shape):
        raise ValueError("x_t, eps_pred and z must share one shape")
    mean = posterior_mean(x_t.data, eps_pred.data, float(sched.betas[t]), float(sched.alpha_bars[t]))
    out = mean + float(sched.sigmas[t]) * z.data
    return LatentTensor(out, timestep_tag=t - 1 if t > 0 else None)


def reverse_step_batch(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: torch.Tensor,
    z: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Batched reverse step; z is ignored where t == 0."""
    ndim = x_t.dim()
    beta = sched.gather("betas", t, ndim, dtype=x_t.dtype)
    alpha_bar = sched.gather("alpha_bars", t, ndim, dtype=x_t.dtype)
    sigma = sched.gather("sigmas", t, ndim, dtype=x_t.dtype)
    keep = (t > 0).to(x_t.dtype).reshape(-1, *([1] * (ndim - 1)))
    return posterior_mean(x_t, eps_pred, beta, alpha_bar) + sigma * z * keep


# =============================================================================
# SAMPLING
# =============================================================================

_sampler_calls = 0


def sampler_call_count() -> int:
    """Number of sampling runs started in this process."""
    return _sampler_calls


def item_noise(seed: int, T: int, shape: Sequence[int]) -> torch.Tensor:
    """
    All Gaussian draws one trajectory needs, from its own generator.

    Row 0 is the initial latent; row k (1..T) is the z used by the k-th
    reverse step. Drawing everything up front keeps a trajectory independent
    of how items are batched.
    """
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn((T + 1, *shape), generator=generator)


def guided_noise(
    predictor: NoisePredictor,
    x: torch.Tensor,
    t: torch.Tensor,
    class_ids: torch.Tensor,
    guidance_scale: Optional[float] = None,
) -> torch.Tensor:
    """Conditional prediction, or eps_u + w * (eps_c - eps_u) when guided."""
    if guidance_scale is None or float(guidance_scale) == 1.0:
        return predictor.predict_noise(x, t, class_ids)
    null = torch.full_like(class_ids, predictor.null_class)
    eps = predictor.predict_noise(torch.cat([x, x]), torch.cat([t, t]), torch.cat([class_ids, null]))
    eps_cond, eps_uncond = eps.chunk(2)
    return eps_uncond + float(guidance_scale) * (eps_cond - eps_uncond)


@torch.no_grad()
def sample_batch(
    predictor: NoisePredictor,
    class_ids: Sequence[int],
    seeds: Sequence[int],
    sched: NoiseSchedule,
    guidance_scale: Optional[float] = None,
    keep_trajectory: bool = False,
) -> torch.Tensor:
    """
    Run ancestral sampling for a batch of (class, seed) pairs.

    Returns:
        Final samples (B, C, H, W), or the whole chain (T+1, B, C, H, W)
        when keep_trajectory is set. Chain row k is the latent tagged T-1-k.
    """
    global _sampler_calls
    if len(class_ids) != len(seeds):
        raise ValueError("class_ids and seeds must have equal length")
    _sampler_calls += 1

    T = sched.T
    noise = torch.stack([item_noise(s, T, predictor.latent_shape) for s in seeds], dim=1)
    classes = torch.as_tensor(list(class_ids), dtype=torch.long)
    x = noise[0]
    chain: List[torch.Tensor] = [x] if keep_trajectory else []
    for k in range(T):
        t_value = T - 1 - k
        t = torch.full((len(seeds),), t_value, dtype=torch.long)
        eps = guided_noise(predictor, x, t, classes, guidance_scale)
        x = reverse_step_batch(x, eps, t, noise[k + 1], sched)
        if keep_trajectory:
            chain.append(x)
    if keep_trajectory:
        return torch.stack(chain)
    return x


def sample(
    model: NoisePredictor,
    cond: Condition,
    sched: NoiseSchedule,
    seed: int,
    guidance_scale: Optional[float] = None,
) -> List[LatentTensor]:
    """
    Full trajectory x_T ... x_0 for one condition.

    Returns:
        T+1 latents; entry k is tagged T-1-k and the last is untagged.
    """
    chain = sample_batch(model, [cond.class_id], [seed], sched, guidance_scale, keep_trajectory=True)
    T = sched.T
    return [
        LatentTensor(chain[k, 0], timestep_tag=(T - 1 - k) if k < T else None)
        for k in range(T + 1)
    ]
