"""
Affine fake quantization.

    q     = clip(round(x / s) + z, qmin, qmax)       (round half to even)
    x_hat = (q - z) * s

The backward pass is a straight-through estimator for x (identity where the
pre-clip code lies in [qmin, qmax], zero outside) and the learned-step-size
rule for s: round(x/s) - x/s inside the range, the clipped code minus z
outside. Zero points never receive gradients.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import torch


SCALE_FLOOR = 1e-8


class Granularity(str, Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


def quant_range(bits: int, signed: bool) -> Tuple[int, int]:
    if not 2 <= bits <= 16:
        raise ValueError(f"bitwidth must be in [2, 16], got {bits}")
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Scale and zero point, scalar (per tensor) or one per channel along `axis`."""
    scale: torch.Tensor
    zero_point: torch.Tensor
    qmin: int
    qmax: int
    bitwidth: int
    granularity: Granularity = Granularity.PER_TENSOR
    axis: int = 0

    def __post_init__(self):
        if not torch.all(self.scale > 0):
            raise ValueError("scale must be strictly positive")
        if self.qmax - self.qmin != 2 ** self.bitwidth - 1:
            raise ValueError(
                f"qmax - qmin = {self.qmax - self.qmin} does not match {self.bitwidth}-bit range"
            )
        if torch.any(self.zero_point < self.qmin) or torch.any(self.zero_point > self.qmax):
            raise ValueError(f"zero_point outside [{self.qmin}, {self.qmax}]")
        if self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero_point shapes differ")
        if self.granularity == Granularity.PER_TENSOR and self.scale.numel() != 1:
            raise ValueError("per_tensor params need a single scale")

    @classmethod
    def create(
        cls,
        scale,
        zero_point,
        bits: int,
        signed: bool = False,
        granularity: Granularity = Granularity.PER_TENSOR,
        axis: int = 0,
    ) -> "QuantParams":
        qmin, qmax = quant_range(bits, signed)
        return cls(
            scale=torch.as_tensor(scale, dtype=torch.float64),
            zero_point=torch.as_tensor(zero_point, dtype=torch.int64),
            qmin=qmin,
            qmax=qmax,
            bitwidth=bits,
            granularity=Granularity(granularity),
            axis=axis,
        )

    def broadcast(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Scale and zero point reshaped to broadcast against x, in x's dtype."""
        scale = self.scale.to(dtype=x.dtype, device=x.device)
        zero_point = self.zero_point.to(dtype=x.dtype, device=x.device)
        if self.granularity == Granularity.PER_CHANNEL:
            shape = [1] * x.dim()
            shape[self.axis] = -1
            return scale.reshape(shape), zero_point.reshape(shape)
        return scale.reshape(()), zero_point.reshape(())


# =============================================================================
# QUANTIZE / DEQUANTIZE
# =============================================================================

def quantize(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    """
    Integer codes of x.

    Raises:
        ValueError: x has non-finite entries
    """
    if not torch.isfinite(x).all():
        raise ValueError("quantize received non-finite input")
    scale, zero_point = p.broadcast(x)
    codes = torch.round(x / scale) + zero_point
    return codes.clamp(p.qmin, p.qmax).to(torch.int64)


def dequantize(q: torch.Tensor, p: QuantParams, dtype=torch.float64) -> torch.Tensor:
    """
    Real values of integer codes.

    Raises:
        ValueError: a code lies outside [qmin, qmax]
    """
    if torch.any(q < p.qmin) or torch.any(q > p.qmax):
        raise ValueError(f"integer codes outside [{p.qmin}, {p.qmax}]")
    scale, zero_point = p.broadcast(q.to(dtype))
    return (q.to(dtype) - zero_point) * scale


def _sum_to_shape(grad: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.dim() > len(shape):
        grad = grad.sum(dim=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(dim=dim, keepdim=True)
    return grad


class FakeQuantize(torch.autograd.Function):
    """Quantize then dequantize with STE input gradients and LSQ scale gradients."""

    @staticmethod
    def forward(ctx, x, scale, zero_point, qmin: int, qmax: int):
        v = x / scale
        rounded = torch.round(v)
        unclipped = rounded + zero_point
        codes = unclipped.clamp(qmin, qmax)
        in_range = (unclipped >= qmin) & (unclipped <= qmax)
        ctx.save_for_backward(v, rounded, codes, zero_point, in_range)
        ctx.scale_shape = scale.shape
        return (codes - zero_point) * scale

    @staticmethod
    def backward(ctx, grad_out):
        v, rounded, codes, zero_point, in_range = ctx.saved_tensors
        grad_x = grad_out * in_range.to(grad_out.dtype)
        local = torch.where(in_range, rounded - v, codes - zero_point)
        grad_scale = _sum_to_shape(grad_out * local, ctx.scale_shape)
        return grad_x, grad_scale, None, None, None


def fake_quant_tensor(x, scale, zero_point, qmin: int, qmax: int) -> torch.Tensor:
    """Functional form over raw (broadcastable) scale and zero-point tensors."""
    return FakeQuantize.apply(x, scale, zero_point, qmin, qmax)


def fake_quant(x: torch.Tensor, p: QuantParams) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise ValueError("fake_quant received non-finite input")
    scale, zero_point = p.broadcast(x)
    return FakeQuantize.apply(x, scale, zero_point, p.qmin, p.qmax)


# =============================================================================
# CALIBRATION
# =============================================================================

class MinMaxObserver:
    """Running min/max, over the whole tensor or per channel along `axis`."""

    def __init__(self, granularity: Granularity = Granularity.PER_TENSOR, axis: int = 0):
        self.granularity = Granularity(granularity)
        self.axis = axis
        self.min_val: Optional[torch.Tensor] = None
        self.max_val: Optional[torch.Tensor] = None
        self.count = 0

    def update(self, x: torch.Tensor):
        x = x.detach().to(torch.float64)
        if not torch.isfinite(x).all():
            raise ValueError("calibration samples must be finite")
        if self.granularity == Granularity.PER_CHANNEL:
            flat = x.transpose(0, self.axis).reshape(x.shape[self.axis], -1)
            lo, hi = flat.min(dim=1).values, flat.max(dim=1).values
        else:
            lo, hi = x.min(), x.max()
        self.min_val = lo if self.min_val is None else torch.minimum(self.min_val, lo)
        self.max_val = hi if self.max_val is None else torch.maximum(self.max_val, hi)
        self.count += 1

    def params(
        self,
        bits: int,
        signed: bool = False,
        symmetric: bool = False,
        scale_floor: float = SCALE_FLOOR,
    ) -> QuantParams:
        if self.count == 0:
            raise ValueError("calibration received an empty sample stream")
        return params_from_range(
            self.min_val, self.max_val, bits, signed, symmetric, self.granularity, self.axis, scale_floor
        )


def params_from_range(
    min_val: torch.Tensor,
    max_val: torch.Tensor,
    bits: int,
    signed: bool = False,
    symmetric: bool = False,
    granularity: Granularity = Granularity.PER_TENSOR,
    axis: int = 0,
    scale_floor: float = SCALE_FLOOR,
) -> QuantParams:
    """
    Min-max parameters.

    Asymmetric: s = (max - min) / (2^bits - 1), z = clip(round(qmin - min / s)).
    Symmetric: s = max|x| / qmax with z = 0 (signed codes).
    Degenerate ranges fall back to the scale floor.
    """
    qmin, qmax = quant_range(bits, signed)
    min_val = torch.as_tensor(min_val, dtype=torch.float64)
    max_val = torch.as_tensor(max_val, dtype=torch.float64)
    if symmetric:
        absmax = torch.maximum(min_val.abs(), max_val.abs())
        scale = (absmax / qmax).clamp_min(scale_floor)
        zero_point = torch.zeros_like(scale, dtype=torch.int64)
    else:
        scale = ((max_val - min_val) / (qmax - qmin)).clamp_min(scale_floor)
        zero_point = torch.round(qmin - min_val / scale).clamp(qmin, qmax).to(torch.int64)
    return QuantParams(
        scale=scale,
        zero_point=zero_point,
        qmin=qmin,
        qmax=qmax,
        bitwidth=bits,
        granularity=Granularity(granularity),
        axis=axis,
    )


def calibrate_minmax(
    samples: Iterable[torch.Tensor],
    bits: int,
    granularity: Granularity = Granularity.PER_TENSOR,
    signed: bool = False,
    symmetric: bool = False,
    axis: int = 0,
    scale_floor: float = SCALE_FLOOR,
) -> QuantParams:
    """
    Calibrate from a stream of samples.

    Raises:
        ValueError: empty stream or non-finite samples
    """
    observer = MinMaxObserver(granularity, axis)
    for sample in samples:
        observer.update(sample)
    return observer.params(bits, signed=signed, symmetric=symmetric, scale_floor=scale_floor)


# =============================================================================
# PER-TIMESTEP BANK
# =============================================================================

@dataclass
class TimestepQuantBank:
    """One per-tensor activation quantizer per timestep for one layer."""
    layer_name: str
    T: int
    params_by_t: Dict[int, QuantParams]

    def __post_init__(self):
        if sorted(self.params_by_t) != list(range(self.T)):
            raise ValueError(f"bank {self.layer_name} must hold exactly the timesteps 0..{self.T - 1}")
        bits = {p.bitwidth for p in self.params_by_t.values()}
        if len(bits) != 1:
            raise ValueError(f"bank {self.layer_name} mixes bitwidths {sorted(bits)}")

    @property
    def bitwidth(self) -> int:
        return self.params_by_t[0].bitwidth

    def lookup(self, t: int) -> QuantParams:
        return self.params_by_t[t]

    def scales(self) -> torch.Tensor:
        return torch.stack([self.params_by_t[t].scale.reshape(()) for t in range(self.T)])

    def zero_points(self) -> torch.Tensor:
        return torch.stack([self.params_by_t[t].zero_point.reshape(()) for t in range(self.T)])

    @classmethod
    def from_tensors(
        cls, layer_name: str, scales: torch.Tensor, zero_points: torch.Tensor, bits: int, signed: bool = False
    ) -> "TimestepQuantBank":
        qmin, qmax = quant_range(bits, signed)
        params = {
            t: QuantParams(
                scale=scales[t].to(torch.float64).reshape(()),
                zero_point=zero_points[t].to(torch.int64).reshape(()),
                qmin=qmin,
                qmax=qmax,
                bitwidth=bits,
            )
            for t in range(len(scales))
        }
        return cls(layer_name=layer_name, T=len(scales), params_by_t=params)


def _interpolated_range(
    t: int, known: Dict[int, Tuple[torch.Tensor, torch.Tensor]]
) -> Tuple[torch.Tensor, torch.Tensor]:
    steps = sorted(known)
    lower = [s for s in steps if s < t]
    upper = [s for s in steps if s > t]
    if not lower:
        return known[upper[0]]
    if not upper:
        return known[lower[-1]]
    a, b = lower[-1], upper[0]
    w = (t - a) / (b - a)
    return (
        known[a][0] * (1 - w) + known[b][0] * w,
        known[a][1] * (1 - w) + known[b][1] * w,
    )


def bank_calibrate(
    layer: str,
    per_t_samples: Mapping[int, Sequence[torch.Tensor]],
    bits: int,
    T: Optional[int] = None,
    interpolate: bool = False,
    signed: bool = False,
    scale_floor: float = SCALE_FLOOR,
) -> TimestepQuantBank:
    """
    Calibrate one per-tensor quantizer per timestep from that timestep's samples only.

    With interpolate, timesteps without samples get min/max linearly
    interpolated between the nearest calibrated neighbours.

    Raises:
        ValueError: a timestep has no samples and interpolation is off
    """
    T = T if T is not None else (max(per_t_samples) + 1 if per_t_samples else 0)
    if T < 1:
        raise ValueError(f"bank {layer} needs at least one timestep")
    known: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}
    for t, samples in per_t_samples.items():
        if not samples:
            continue
        observer = MinMaxObserver()
        for sample in samples:
            observer.update(sample)
        known[int(t)] = (observer.min_val, observer.max_val)

    missing = [t for t in range(T) if t not in known]
    if missing and (not interpolate or not known):
        raise ValueError(f"bank {layer} has no calibration samples for timesteps {missing[:10]}")

    params = {}
    for t in range(T):
        lo, hi = known[t] if t in known else _interpolated_range(t, known)
        params[t] = params_from_range(lo, hi, bits, signed=signed, scale_floor=scale_floor)
    return TimestepQuantBank(layer_name=layer, T=T, params_by_t=params)


# =============================================================================
# CONFIG
# =============================================================================

@dataclass
class QuantConfig:
    """
    Bitwidths and switches for one quantized model.

    Weights are per-channel symmetric signed; activations are static
    per-tensor asymmetric unsigned, one parameter set per timestep when
    multi_timestep is on and a single shared set otherwise.
    """
    w_bits: int = 4
    a_bits: int = 8
    weight_granularity: Granularity = Granularity.PER_CHANNEL
    act_granularity: Granularity = Granularity.PER_TENSOR
    multi_timestep: bool = True
    quantize_time_layers: bool = False
    scale_floor: float = SCALE_FLOOR

    def __post_init__(self):
        for name in ("w_bits", "a_bits"):
            bits = getattr(self, name)
            if not 2 <= bits <= 16:
                raise ValueError(f"{name} must be in [2, 16], got {bits}")
        self.weight_granularity = Granularity(self.weight_granularity)
        self.act_granularity = Granularity(self.act_granularity)

    @classmethod
    def from_config(cls, quant: Mapping[str, object]) -> "QuantConfig":
        return cls(
            w_bits=int(quant["w_bits"]),
            a_bits=int(quant["a_bits"]),
            multi_timestep=bool(quant["multi_timestep"]),
            quantize_time_layers=bool(quant["quantize_time_layers"]),
            scale_floor=float(quant["scale_floor"]),
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "QuantConfig":
        return cls(**dict(data))

    def to_dict(self) -> Dict[str, object]:
        return {
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "weight_granularity": self.weight_granularity.value,
            "act_granularity": self.act_granularity.value,
            "multi_timestep": self.multi_timestep,
            "quantize_time_layers": self.quantize_time_layers,
            "scale_floor": self.scale_floor,
        }
