"""
Quantized denoiser: every conv/linear layer gets a per-channel weight
quantizer and a per-timestep activation quantizer on its input.

Activation scales of one layer live in a (slots, 1) table gathered with
sparse gradients, so a batch only produces scale gradients for the
timesteps it contains. Paired with SparseAdam, entries of absent
timesteps stay bit-identical.
"""

import copy
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifact_io import fingerprint_tensors, read_tensor_artifact, write_tensor_artifact
from .denoiser import BLOCK_IDS, DenoiserConfig, DenoiserModel, TimestepRouter
from .quantcore import (
    Granularity,
    MinMaxObserver,
    QuantConfig,
    QuantParams,
    TimestepQuantBank,
    bank_calibrate,
    fake_quant_tensor,
    quant_range,
    quantize,
)


TIME_INPUT_PREFIX = "time_input."


# =============================================================================
# QUANTIZER MODULES
# =============================================================================

class WeightQuantizer(nn.Module):
    """
    Per-output-channel symmetric signed fake quantizer with a trainable scale.

    Frozen positions reuse their pinned integer code; their latent weight is
    restored after every optimizer step. The shared channel scale keeps
    training.
    """

    def __init__(self, weight: torch.Tensor, bits: int, scale_floor: float):
        super().__init__()
        self.bits = bits
        self.qmin, self.qmax = quant_range(bits, signed=True)
        self.scale_floor = scale_floor
        absmax = weight.detach().abs().reshape(weight.shape[0], -1).max(dim=1).values
        self.scale = nn.Parameter((absmax / self.qmax).clamp_min(scale_floor).float())
        self.register_buffer("freeze_mask", torch.zeros_like(weight, dtype=torch.bool))
        self.register_buffer("frozen_codes", torch.zeros_like(weight, dtype=torch.int64))
        self.register_buffer("frozen_latent", torch.zeros_like(weight))

    def _scale_view(self, weight: torch.Tensor) -> torch.Tensor:
        shape = [-1] + [1] * (weight.dim() - 1)
        return self.scale.clamp_min(self.scale_floor).reshape(shape)

    def params(self) -> QuantParams:
        scale = self.scale.detach().clamp_min(self.scale_floor).to(torch.float64)
        return QuantParams(
            scale=scale,
            zero_point=torch.zeros_like(scale, dtype=torch.int64),
            qmin=self.qmin,
            qmax=self.qmax,
            bitwidth=self.bits,
            granularity=Granularity.PER_CHANNEL,
            axis=0,
        )

    @torch.no_grad()
    def codes(self, weight: torch.Tensor) -> torch.Tensor:
        """Effective integer codes, pinned codes where frozen."""
        live = quantize(weight.detach().to(torch.float64), self.params())
        return torch.where(self.freeze_mask, self.frozen_codes, live)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        scale = self._scale_view(weight)
        zero = torch.zeros((), dtype=weight.dtype)
        out = fake_quant_tensor(weight, scale, zero, self.qmin, self.qmax)
        if bool(self.freeze_mask.any()):
            # frozen integer codes stay fixed; their dequantized value follows the trained scale
            pinned = self.frozen_codes.to(weight.dtype) * scale
            out = torch.where(self.freeze_mask, pinned, out)
        return out

    @torch.no_grad()
    def freeze(self, new_mask: torch.Tensor, codes: torch.Tensor, weight: torch.Tensor):
        self.frozen_codes.copy_(torch.where(new_mask, codes, self.frozen_codes))
        self.frozen_latent.copy_(torch.where(new_mask, weight.detach(), self.frozen_latent))
        self.freeze_mask |= new_mask

    @torch.no_grad()
    def restore_frozen(self, weight: nn.Parameter):
        if bool(self.freeze_mask.any()):
            weight.copy_(torch.where(self.freeze_mask, self.frozen_latent, weight))


class TimestepActQuantizer(nn.Module):
    """
    Per-tensor asymmetric activation quantizer indexed by the sample's timestep.

    With a single slot every timestep shares one parameter set.
    """

    def __init__(
        self,
        router: TimestepRouter,
        T: int,
        bits: int,
        multi_timestep: bool = True,
        scale_floor: float = 1e-8,
    ):
        super().__init__()
        self.router = router
        self.T = T
        self.bits = bits
        self.multi_timestep = multi_timestep
        self.qmin, self.qmax = quant_range(bits, signed=False)
        self.scale_floor = scale_floor
        slots = T if multi_timestep else 1
        self.scale = nn.Parameter(torch.ones(slots, 1))
        self.register_buffer("zero_point", torch.zeros(slots, dtype=torch.int64))

    @property
    def num_slots(self) -> int:
        return self.scale.shape[0]

    def slots_for(self, t: torch.Tensor) -> torch.Tensor:
        if self.multi_timestep:
            return t.long()
        return torch.zeros_like(t, dtype=torch.long)

    @torch.no_grad()
    def load_bank(self, bank: TimestepQuantBank):
        if self.multi_timestep:
            if bank.T != self.T:
                raise ValueError(f"bank {bank.layer_name} covers {bank.T} timesteps, expected {self.T}")
            self.scale.copy_(bank.scales().float().reshape(-1, 1))
            self.zero_point.copy_(bank.zero_points())
        else:
            first = bank.lookup(0)
            self.scale.fill_(float(first.scale))
            self.zero_point.fill_(int(first.zero_point))

    def to_bank(self, layer_name: str) -> TimestepQuantBank:
        scales = self.scale.detach().clamp_min(self.scale_floor).reshape(-1)
        zero_points = self.zero_point
        if not self.multi_timestep:
            scales = scales.expand(self.T)
            zero_points = zero_points.expand(self.T)
        return TimestepQuantBank.from_tensors(layer_name, scales, zero_points, self.bits)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = self.router.t
        if t is None or t.shape[0] != x.shape[0]:
            raise RuntimeError("activation quantizer has no timesteps routed for this batch")
        slots = self.slots_for(t)
        shape = [-1] + [1] * (x.dim() - 1)
        scale = F.embedding(slots, self.scale, sparse=True).clamp_min(self.scale_floor).reshape(shape)
        zero_point = self.zero_point[slots].to(x.dtype).reshape(shape)
        return fake_quant_tensor(x, scale.to(x.dtype), zero_point, self.qmin, self.qmax)


class QuantConv2d(nn.Conv2d):
    """Conv2d that fake-quantizes its input activation and its weight."""

    @classmethod
    def from_float(cls, conv: nn.Conv2d, act_quant: TimestepActQuantizer, weight_quant_cfg: QuantConfig) -> "QuantConv2d":
        q = cls(
            conv.in_channels, conv.out_channels, conv.kernel_size,
            stride=conv.stride, padding=conv.padding, dilation=conv.dilation,
            groups=conv.groups, bias=conv.bias is not None,
        )
        q.load_state_dict(conv.state_dict())
        q.act_quant = act_quant
        q.weight_quant = WeightQuantizer(q.weight, weight_quant_cfg.w_bits, weight_quant_cfg.scale_floor)
        return q

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(self.act_quant(x), self.weight_quant(self.weight), self.bias)


class QuantLinear(nn.Linear):
    """Linear that fake-quantizes its input activation and its weight."""

    @classmethod
    def from_float(cls, linear: nn.Linear, act_quant: TimestepActQuantizer, weight_quant_cfg: QuantConfig) -> "QuantLinear":
        q = cls(linear.in_features, linear.out_features, bias=linear.bias is not None)
        q.load_state_dict(linear.state_dict())
        q.act_quant = act_quant
        q.weight_quant = WeightQuantizer(q.weight, weight_quant_cfg.w_bits, weight_quant_cfg.scale_floor)
        return q

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(self.act_quant(x), self.weight_quant(self.weight), self.bias)


# =============================================================================
# QUANTIZED MODEL
# =============================================================================

def activation_sites(model: DenoiserModel, cfg: QuantConfig) -> List[str]:
    """Every activation the quantized model fake-quantizes, in registry order."""
    sites = model.quantizable_layers(include_time_layers=cfg.quantize_time_layers)
    if model.stripped:
        sites += [f"{TIME_INPUT_PREFIX}{bid}" for bid in BLOCK_IDS]
    return sites


class QuantizedModel(nn.Module):
    """A denoiser copy with fake quantizers wired into every site."""

    def __init__(self, model: DenoiserModel, cfg: QuantConfig, T: int):
        super().__init__()
        self.model = model
        self.cfg = cfg
        self.T = T
        self.sites = activation_sites(model, cfg)

    # Delegation used by samplers and trainers
    @property
    def null_class(self) -> int:
        return self.model.null_class

    @property
    def latent_shape(self):
        return self.model.latent_shape

    @property
    def stripped(self) -> bool:
        return self.model.stripped

    @property
    def schedule_fingerprint(self) -> Optional[str]:
        return self.model.schedule_fingerprint

    def reference_fingerprint(self) -> str:
        return self.model.reference_fingerprint()

    def bind_time_cache(self, cache) -> "QuantizedModel":
        self.model.bind_time_cache(cache)
        return self

    def predict_noise(self, x: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        return self.model.predict_noise(x, t, class_ids)

    def forward(self, x, time_input, class_ids):
        return self.model(x, time_input, class_ids)

    # Quantizer access
    def quant_layers(self) -> Dict[str, nn.Module]:
        modules = dict(self.model.named_modules())
        return {
            name: modules[name]
            for name in self.sites
            if not name.startswith(TIME_INPUT_PREFIX)
        }

    def weight_quantizers(self) -> Dict[str, WeightQuantizer]:
        return {name: layer.weight_quant for name, layer in self.quant_layers().items()}

    def act_quantizers(self) -> Dict[str, TimestepActQuantizer]:
        quantizers = {name: layer.act_quant for name, layer in self.quant_layers().items()}
        if self.model.time_input_quant is not None:
            for bid in BLOCK_IDS:
                quantizers[f"{TIME_INPUT_PREFIX}{bid}"] = self.model.time_input_quant[bid]
        return quantizers

    def bank_parameters(self) -> List[nn.Parameter]:
        return [q.scale for q in self.act_quantizers().values()]

    def weight_scale_parameters(self) -> List[nn.Parameter]:
        return [q.scale for q in self.weight_quantizers().values()]

    def network_parameters(self) -> List[nn.Parameter]:
        """Latent weights, biases, norms and embeddings (everything but quantizer scales)."""
        quantizer_ids = {id(p) for p in self.bank_parameters() + self.weight_scale_parameters()}
        return [p for p in self.model.parameters() if id(p) not in quantizer_ids]

    def banks(self) -> Dict[str, TimestepQuantBank]:
        return {name: q.to_bank(name) for name, q in self.act_quantizers().items()}

    @torch.no_grad()
    def restore_frozen(self):
        for name, layer in self.quant_layers().items():
            layer.weight_quant.restore_frozen(layer.weight)

    @torch.no_grad()
    def apply_freeze(self, mask) -> int:
        """Push newly frozen positions from a FreezeMask into the weight quantizers."""
        layers = self.quant_layers()
        newly = 0
        for name, layer_mask in mask.masks.items():
            quantizer = layers[name].weight_quant
            new = layer_mask & ~quantizer.freeze_mask
            if bool(new.any()):
                quantizer.freeze(new, mask.frozen_codes[name], layers[name].weight)
                newly += int(new.sum())
        return newly

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.state_dict())


def _build_quantized(model: DenoiserModel, cfg: QuantConfig, T: int) -> QuantizedModel:
    qmodel = copy.deepcopy(model)
    router = qmodel.router
    for name in qmodel.quantizable_layers(include_time_layers=cfg.quantize_time_layers):
        parent_name, _, attr = name.rpartition(".")
        parent = qmodel.get_submodule(parent_name) if parent_name else qmodel
        layer = getattr(parent, attr) if not isinstance(parent, nn.ModuleDict) else parent[attr]
        act = TimestepActQuantizer(router, T, cfg.a_bits, cfg.multi_timestep, cfg.scale_floor)
        if isinstance(layer, nn.Conv2d):
            replacement = QuantConv2d.from_float(layer, act, cfg)
        else:
            replacement = QuantLinear.from_float(layer, act, cfg)
        if isinstance(parent, nn.ModuleDict):
            parent[attr] = replacement
        else:
            setattr(parent, attr, replacement)
    if qmodel.stripped:
        qmodel.time_input_quant = nn.ModuleDict({
            bid: TimestepActQuantizer(router, T, cfg.a_bits, cfg.multi_timestep, cfg.scale_floor)
            for bid in BLOCK_IDS
        })
    return QuantizedModel(qmodel, cfg, T)


def attach_quantizers(
    model: DenoiserModel,
    cfg: QuantConfig,
    banks: Mapping[str, TimestepQuantBank],
    T: Optional[int] = None,
) -> QuantizedModel:
    """
    Wrap a copy of the model with fake quantizers.

    Weight scales start from per-channel absmax; activation parameters come
    from the banks. Time layers are only quantized when the model still has
    them and cfg.quantize_time_layers is set.

    Raises:
        ValueError: an activation site has no bank
    """
    sites = activation_sites(model, cfg)
    missing = [s for s in sites if s not in banks]
    if missing:
        raise ValueError(f"No calibration bank for activation sites: {missing}")
    T = T if T is not None else next(iter(banks.values())).T
    qmodel = _build_quantized(model, cfg, T)
    for name, quantizer in qmodel.act_quantizers().items():
        quantizer.load_bank(banks[name])
    if model.time_cache is not None:
        qmodel.model.time_cache = model.time_cache
    return qmodel


# =============================================================================
# CALIBRATION
# =============================================================================

class _RangeCollector:
    """Per-site, per-timestep min/max of layer inputs seen during forward passes."""

    def __init__(self, router: TimestepRouter):
        self.router = router
        self.ranges: Dict[str, Dict[int, List[torch.Tensor]]] = {}

    def observe(self, site: str, x: torch.Tensor):
        t = self.router.t
        per_t = self.ranges.setdefault(site, {})
        flat = x.detach().reshape(x.shape[0], -1).to(torch.float64)
        lo, hi = flat.min(dim=1).values, flat.max(dim=1).values
        for value in torch.unique(t):
            rows = t == value
            per_t.setdefault(int(value), []).append(
                torch.stack([lo[rows].min(), hi[rows].max()])
            )

    def hook(self, site: str):
        def _pre_hook(module, inputs):
            self.observe(site, inputs[0])
        return _pre_hook


@torch.no_grad()
def collect_activation_ranges(
    model: DenoiserModel,
    batches: Iterable[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    cfg: QuantConfig,
) -> Dict[str, Dict[int, List[torch.Tensor]]]:
    """
    Run FP forwards over (x_t, t, class_ids) batches, recording each site's
    input range per timestep. Cached time inputs are read from the bound cache.
    """
    collector = _RangeCollector(model.router)
    modules = dict(model.named_modules())
    handles = []
    for site in model.quantizable_layers(include_time_layers=cfg.quantize_time_layers):
        handles.append(modules[site].register_forward_pre_hook(collector.hook(site)))
    try:
        for x, t, class_ids in batches:
            model.predict_noise(x, t, class_ids)
    finally:
        for handle in handles:
            handle.remove()

    if model.stripped:
        cache = model.time_cache
        for bid in BLOCK_IDS:
            site = f"{TIME_INPUT_PREFIX}{bid}"
            collector.ranges[site] = {
                t: [torch.stack([row.min(), row.max()]).to(torch.float64)]
                for t, row in enumerate(cache.projections[bid])
            }
    return collector.ranges


def calibrate_banks(
    model: DenoiserModel,
    batches: Iterable[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    cfg: QuantConfig,
    T: int,
    interpolate: bool = False,
) -> Dict[str, TimestepQuantBank]:
    """
    Min-max calibrate every activation site.

    Multi-timestep banks calibrate each t from its own samples; a shared
    quantizer pools all timesteps into one range.
    """
    ranges = collect_activation_ranges(model, batches, cfg)
    banks = {}
    for site in activation_sites(model, cfg):
        per_t = ranges.get(site, {})
        if cfg.multi_timestep:
            banks[site] = bank_calibrate(
                site, per_t, cfg.a_bits, T=T, interpolate=interpolate, scale_floor=cfg.scale_floor
            )
        else:
            observer = MinMaxObserver()
            for samples in per_t.values():
                for sample in samples:
                    observer.update(sample)
            shared = observer.params(cfg.a_bits, scale_floor=cfg.scale_floor)
            banks[site] = TimestepQuantBank(site, T, {t: shared for t in range(T)})
    return banks


def bank_parameter_report(qmodel: QuantizedModel) -> Dict[str, Any]:
    """Bank size against the model's own parameter count."""
    quantizer_ids = {id(p) for p in qmodel.bank_parameters() + qmodel.weight_scale_parameters()}
    model_params = sum(p.numel() for p in qmodel.model.parameters() if id(p) not in quantizer_ids)
    sites = len(qmodel.act_quantizers())
    bank_params = sites * qmodel.T * 2
    return {
        "activation_sites": sites,
        "T": qmodel.T,
        "bank_parameters": bank_params,
        "model_parameters": model_params,
        "bank_fraction": bank_params / model_params,
    }


# =============================================================================
# PERSISTENCE
# =============================================================================

def save_quant_pack(qmodel: QuantizedModel, path: Path, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """Weight scales and activation banks per layer, with bitwidths and calibration provenance."""
    tensors: Dict[str, torch.Tensor] = {}
    for name, quantizer in qmodel.weight_quantizers().items():
        tensors[f"{name}.weight_scale"] = quantizer.scale.detach()
    for name, bank in qmodel.banks().items():
        tensors[f"{name}.act_scale"] = bank.scales()
        tensors[f"{name}.act_zero_point"] = bank.zero_points()
    header = {
        "quant": qmodel.cfg.to_dict(),
        "T": qmodel.T,
        "sites": qmodel.sites,
        "model_fingerprint": qmodel.reference_fingerprint(),
        "provenance": provenance or {},
    }
    return write_tensor_artifact(path, "qpack", tensors, header)


def load_quant_pack(path: Path) -> Tuple[QuantConfig, Dict[str, TimestepQuantBank], Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Returns:
        (QuantConfig, banks by site, weight scales by layer, header)
    """
    header, tensors = read_tensor_artifact(path, "qpack")
    cfg = QuantConfig.from_dict(header["quant"])
    banks = {
        site: TimestepQuantBank.from_tensors(
            site, tensors[f"{site}.act_scale"], tensors[f"{site}.act_zero_point"], cfg.a_bits
        )
        for site in header["sites"]
    }
    weight_scales = {
        key[: -len(".weight_scale")]: value for key, value in tensors.items() if key.endswith(".weight_scale")
    }
    return cfg, banks, weight_scales, header


@torch.no_grad()
def apply_weight_scales(qmodel: QuantizedModel, weight_scales: Mapping[str, torch.Tensor]):
    for name, quantizer in qmodel.weight_quantizers().items():
        if name in weight_scales:
            quantizer.scale.copy_(weight_scales[name].float())


def save_quantized_model(qmodel: QuantizedModel, path: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
    header = {
        "config": asdict(qmodel.model.config),
        "quant": qmodel.cfg.to_dict(),
        "T": qmodel.T,
        "stripped": qmodel.stripped,
        "parent_fingerprint": qmodel.reference_fingerprint(),
        "schedule_fingerprint": qmodel.schedule_fingerprint,
        "fingerprint": qmodel.fingerprint(),
        "extra": extra or {},
    }
    return write_tensor_artifact(path, "qckpt", qmodel.model.state_dict(), header)


def load_quantized_model(path: Path) -> QuantizedModel:
    header, tensors = read_tensor_artifact(path, "qckpt")
    base = DenoiserModel(DenoiserConfig(**header["config"]))
    if header["stripped"]:
        base.time_embed = None
        base.time_proj = None
        base.stripped = True
    base.parent_fingerprint = header["parent_fingerprint"]
    base.schedule_fingerprint = header.get("schedule_fingerprint")
    cfg = QuantConfig.from_dict(header["quant"])
    qmodel = _build_quantized(base, cfg, int(header["T"]))
    qmodel.model.load_state_dict(tensors)
    qmodel.eval()
    return qmodel
