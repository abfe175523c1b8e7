"""
Weight-oscillation tracking on integer codes, gradient sign-flip statistics
and the selective freezing policy for sensitive layers.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional

import torch

from .quantcore import QuantParams, quantize


# =============================================================================
# OSCILLATION TRACKING
# =============================================================================

@dataclass
class OscillationTracker:
    """
    Per-layer EMA of integer-code flips.

    The first observation only records codes; each later one sets the flip
    indicator where a code changed and blends it in with momentum m.
    """
    momentum: float = 0.1
    prev_codes: Dict[str, torch.Tensor] = field(default_factory=dict)
    flip_ema: Dict[str, torch.Tensor] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")

    @property
    def layers(self) -> List[str]:
        return list(self.flip_ema)

    def observe(self, codes: Mapping[str, torch.Tensor]) -> "OscillationTracker":
        """Record one step of integer codes per layer."""
        for name, current in codes.items():
            current = current.detach().to(torch.int64)
            previous = self.prev_codes.get(name)
            if previous is None:
                self.flip_ema[name] = torch.zeros(current.shape, dtype=torch.float64)
            else:
                if previous.shape != current.shape:
                    raise ValueError(
                        f"Layer {name} changed shape mid-training: {tuple(previous.shape)} -> {tuple(current.shape)}"
                    )
                flips = (current != previous).to(torch.float64)
                self.flip_ema[name] = self.momentum * flips + (1.0 - self.momentum) * self.flip_ema[name]
            self.prev_codes[name] = current.clone()
        self.iteration += 1
        return self

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {name: ema.clone() for name, ema in self.flip_ema.items()}


def update_oscillation(
    tracker: OscillationTracker,
    current_weights: Mapping[str, torch.Tensor],
    params: Mapping[str, QuantParams],
) -> OscillationTracker:
    """Quantize the current weights and feed their codes to the tracker."""
    codes = {
        name: quantize(weight.detach().to(torch.float64), params[name])
        for name, weight in current_weights.items()
    }
    return tracker.observe(codes)


def oscillation_fraction(
    tracker: OscillationTracker,
    threshold: float,
    layers: Optional[Iterable[str]] = None,
) -> float:
    """Percentage of tracked weights whose flip EMA exceeds the threshold."""
    names = list(layers) if layers is not None else tracker.layers
    total = sum(tracker.flip_ema[n].numel() for n in names if n in tracker.flip_ema)
    if total == 0:
        return 0.0
    above = sum(int((tracker.flip_ema[n] > threshold).sum()) for n in names if n in tracker.flip_ema)
    return 100.0 * above / total


# =============================================================================
# SELECTIVE FREEZING
# =============================================================================

@dataclass
class FreezeMask:
    """Monotone per-layer freeze masks and the integer codes pinned at freeze time."""
    masks: Dict[str, torch.Tensor] = field(default_factory=dict)
    frozen_codes: Dict[str, torch.Tensor] = field(default_factory=dict)
    events: List[Dict[str, object]] = field(default_factory=list)

    def count(self) -> int:
        return sum(int(m.sum()) for m in self.masks.values())


def apply_selective_freeze(
    tracker: OscillationTracker,
    mask: FreezeMask,
    sensitive: Iterable[str],
    every: int = 500,
    threshold: float = 0.1,
) -> FreezeMask:
    """
    At tracker iterations divisible by `every`, freeze sensitive weights whose
    flip EMA exceeds the threshold, pinning their current code.

    Freezing is monotone. Only layers the tracker follows are eligible.

    Raises:
        ValueError: every <= 0
    """
    if every <= 0:
        raise ValueError(f"every must be positive, got {every}")
    if tracker.iteration == 0 or tracker.iteration % every != 0:
        return mask

    for name in sensitive:
        if name not in tracker.flip_ema:
            continue
        ema = tracker.flip_ema[name]
        current = mask.masks.get(name)
        if current is None:
            current = torch.zeros(ema.shape, dtype=torch.bool)
            mask.frozen_codes[name] = torch.zeros(ema.shape, dtype=torch.int64)
        new = (ema > threshold) & ~current
        if bool(new.any()):
            mask.frozen_codes[name] = torch.where(new, tracker.prev_codes[name], mask.frozen_codes[name])
            mask.events.append({"iteration": tracker.iteration, "layer_count": int(new.sum()), "layer": name})
        mask.masks[name] = current | new
    return mask


# =============================================================================
# GRADIENT STATISTICS
# =============================================================================

@dataclass
class GradStats:
    """Per-layer gradient L2 norm, mean, and elementwise sign-flip rate per iteration."""
    norms: Dict[str, List[float]] = field(default_factory=dict)
    means: Dict[str, List[float]] = field(default_factory=dict)
    flip_rates: Dict[str, List[float]] = field(default_factory=dict)
    _prev_sign: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def record(self, name: str, grad: torch.Tensor):
        grad = grad.detach()
        if not torch.isfinite(grad).all():
            raise ValueError(f"Non-finite gradient in layer {name}")
        sign = torch.sign(grad)
        previous = self._prev_sign.get(name)
        rate = float((sign != previous).float().mean()) if previous is not None else 0.0
        self._prev_sign[name] = sign
        self.norms.setdefault(name, []).append(float(grad.norm()))
        self.means.setdefault(name, []).append(float(grad.mean()))
        self.flip_rates.setdefault(name, []).append(rate)

    def record_means(self, name: str, means: Iterable[float]):
        """Replay a stream of per-iteration mean gradients."""
        self.means.setdefault(name, []).extend(float(m) for m in means)

    def __len__(self) -> int:
        return max((len(v) for v in self.means.values()), default=0)


def gradient_oscillation_index(stats: GradStats, window: int) -> Dict[str, float]:
    """
    Per layer, the fraction of consecutive pairs among the last `window`
    iterations whose mean gradient changed sign.

    Raises:
        ValueError: window < 2 or fewer than `window` iterations logged
    """
    if window < 2:
        raise ValueError(f"window must be at least 2, got {window}")
    index = {}
    for name, means in stats.means.items():
        if len(means) < window:
            raise ValueError(f"Layer {name} has {len(means)} logged iterations, need {window}")
        signs = torch.sign(torch.tensor(means[-window:], dtype=torch.float64))
        index[name] = float((signs[1:] != signs[:-1]).double().mean())
    return index
