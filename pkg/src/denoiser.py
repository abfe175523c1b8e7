"""
Small conditional U-Net noise predictor with a named layer registry.

Two down blocks, a bottleneck with a feed-forward projection pair, two up
blocks joined to the encoder by concatenation shortcuts. Each residual block
receives a per-block time projection of the sinusoidal time embedding plus a
slice of the projected class embedding.
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .artifact_io import fingerprint_tensors, read_tensor_artifact, write_tensor_artifact
from .diffcore import Condition, LatentTensor


BLOCK_IDS = ("down1", "down2", "mid", "up2", "up1")


class LayerRole(str, Enum):
    SHORTCUT = "shortcut_projection"
    FFN = "ffn_projection"
    TIME_EMBEDDING = "time_embedding"
    TIME_PROJECTION = "time_projection"
    OTHER = "other"


class IncompatibleTimeInputError(TypeError):
    """Raw timesteps given to a stripped model, or cached features to a full one."""


@dataclass
class LayerInfo:
    name: str
    role: LayerRole
    module: nn.Module
    param_names: Tuple[str, ...]


@dataclass
class TimeFeatures:
    """Per-sample time embedding e_t and per-block projections ep_{t,i}."""
    timesteps: torch.Tensor
    emb: torch.Tensor
    projections: Dict[str, torch.Tensor]


class TimestepRouter:
    """Holds the per-sample timesteps of the forward pass in flight."""

    def __init__(self):
        self.t: Optional[torch.Tensor] = None


@dataclass
class DenoiserConfig:
    in_channels: int = 1
    image_size: int = 16
    base_channels: int = 16
    time_embed_dim: int = 32
    hidden_time_dim: int = 128
    cond_embed_dim: int = 32
    ffn_mult: int = 2
    groups: int = 8
    num_classes: int = 10

    @classmethod
    def from_config(cls, model: Dict[str, Any], data: Dict[str, Any]) -> "DenoiserConfig":
        return cls(num_classes=int(data["num_classes"]), **{k: int(v) for k, v in model.items()})

    @property
    def block_widths(self) -> Tuple[int, ...]:
        c = self.base_channels
        return (c, 2 * c, 4 * c, 2 * c, c)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.linear1 = nn.Linear(embed_dim, hidden_dim)
        self.linear2 = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.linear2(F.silu(self.linear1(sinusoidal_embedding(t, self.embed_dim))))


class ResBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, inject: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + inject[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DenoiserModel(nn.Module):
    """
    Noise predictor eps(x_t, t, class).

    A full model computes time features from raw timesteps. After
    strip_time_layers it only accepts TimeFeatures, normally looked up
    from a bound TimeCache.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        g = config.groups
        widths = config.block_widths

        self.time_embed = TimeEmbedding(config.time_embed_dim, config.hidden_time_dim)
        self.time_proj = nn.ModuleDict(
            {bid: nn.Linear(config.hidden_time_dim, w) for bid, w in zip(BLOCK_IDS, widths)}
        )
        self.class_embed = nn.Embedding(config.num_classes + 1, config.cond_embed_dim)
        self.cond_proj = nn.Linear(config.cond_embed_dim, sum(widths))

        self.conv_in = nn.Conv2d(config.in_channels, c, 3, padding=1)
        self.down1 = ResBlock(c, g)
        self.downsample1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * c, g)
        self.downsample2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(4 * c, g)
        self.ffn_norm = nn.GroupNorm(g, 4 * c)
        self.ffn_in = nn.Conv2d(4 * c, 4 * c * config.ffn_mult, 1)
        self.ffn_out = nn.Conv2d(4 * c * config.ffn_mult, 4 * c, 1)
        self.upsample2 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.skip_proj2 = nn.Conv2d(4 * c, 2 * c, 1)
        self.up2 = ResBlock(2 * c, g)
        self.upsample1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.skip_proj1 = nn.Conv2d(2 * c, c, 1)
        self.up1 = ResBlock(c, g)
        self.out_norm = nn.GroupNorm(g, c)
        self.conv_out = nn.Conv2d(c, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

        self.time_input_quant: Optional[nn.ModuleDict] = None
        self.router = TimestepRouter()
        self.stripped = False
        self.parent_fingerprint: Optional[str] = None
        self.schedule_fingerprint: Optional[str] = None
        self.time_cache = None

    # -------------------------------------------------------------------------
    # Registry
    # -------------------------------------------------------------------------
    @property
    def null_class(self) -> int:
        return self.config.num_classes

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return (self.config.in_channels, self.config.image_size, self.config.image_size)

    def _role_of(self, name: str) -> LayerRole:
        if name.startswith("time_embed."):
            return LayerRole.TIME_EMBEDDING
        if name.startswith("time_proj."):
            return LayerRole.TIME_PROJECTION
        if name.startswith("skip_proj"):
            return LayerRole.SHORTCUT
        if name in ("ffn_in", "ffn_out"):
            return LayerRole.FFN
        return LayerRole.OTHER

    def registry(self) -> Dict[str, LayerInfo]:
        """
        Parameter-owning layers in definition order.

        Each entry lists only the layer's own parameters, so roles
        partition the FP model's parameters. Quantizer parameters belong
        to quantizer submodules and are not registered.
        """
        entries: Dict[str, LayerInfo] = {}
        for name, module in self.named_modules():
            if not isinstance(module, (nn.Conv2d, nn.Linear, nn.GroupNorm, nn.Embedding)):
                continue
            own = tuple(f"{name}.{p}" for p, _ in module.named_parameters(recurse=False))
            entries[name] = LayerInfo(name=name, role=self._role_of(name), module=module, param_names=own)
        return entries

    def layers_with_role(self, *roles: LayerRole) -> List[str]:
        return [name for name, info in self.registry().items() if info.role in roles]

    def quantizable_layers(self, include_time_layers: bool = False) -> List[str]:
        """Conv and linear layers, time layers only on request."""
        names = []
        for name, info in self.registry().items():
            if not isinstance(info.module, (nn.Conv2d, nn.Linear)):
                continue
            if info.role in (LayerRole.TIME_EMBEDDING, LayerRole.TIME_PROJECTION) and not include_time_layers:
                continue
            names.append(name)
        return names

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.state_dict())

    def reference_fingerprint(self) -> str:
        """Fingerprint of the full FP model this one derives from."""
        return self.parent_fingerprint or self.fingerprint()

    # -------------------------------------------------------------------------
    # Time features
    # -------------------------------------------------------------------------
    def _time_row(self, value: int) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        t1 = torch.tensor([value], dtype=torch.long)
        self.router.t = t1
        emb = self.time_embed(t1)
        hidden = F.silu(emb)
        return emb, {bid: self.time_proj[bid](hidden) for bid in BLOCK_IDS}

    def time_features(self, t: torch.Tensor) -> TimeFeatures:
        """
        Compute e_t and ep_{t,i} for a batch of timesteps.

        Rows are evaluated one distinct timestep at a time, so live rows
        and cached rows are bitwise equal.
        """
        if self.stripped:
            raise IncompatibleTimeInputError("Time layers were stripped; pass cached TimeFeatures")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        unique, inverse = torch.unique(t, return_inverse=True)
        rows = [self._time_row(int(v)) for v in unique]
        emb = torch.cat([r[0] for r in rows])[inverse]
        projections = {bid: torch.cat([r[1][bid] for r in rows])[inverse] for bid in BLOCK_IDS}
        return TimeFeatures(timesteps=t, emb=emb, projections=projections)

    def _resolve_time(self, time_input: Union[int, torch.Tensor, TimeFeatures], batch: int) -> TimeFeatures:
        if isinstance(time_input, TimeFeatures):
            if not self.stripped:
                raise IncompatibleTimeInputError("Full model expects raw timesteps, got cached TimeFeatures")
            return time_input
        if self.stripped:
            raise IncompatibleTimeInputError("Stripped model expects cached TimeFeatures, got raw timesteps")
        t = torch.as_tensor(time_input, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and batch > 1:
            t = t.expand(batch)
        return self.time_features(t)

    # -------------------------------------------------------------------------
    # Forward
    # -------------------------------------------------------------------------
    def forward(
        self,
        x: torch.Tensor,
        time_input: Union[int, torch.Tensor, TimeFeatures],
        class_ids: torch.Tensor,
    ) -> torch.Tensor:
        feats = self._resolve_time(time_input, x.shape[0])
        self.router.t = feats.timesteps

        cond = self.cond_proj(self.class_embed(class_ids.long()))
        cond_parts = dict(zip(BLOCK_IDS, torch.split(cond, list(self.config.block_widths), dim=1)))
        inject = {}
        for bid in BLOCK_IDS:
            ep = feats.projections[bid]
            if self.time_input_quant is not None:
                ep = self.time_input_quant[bid](ep)
            inject[bid] = ep + cond_parts[bid]

        h = self.conv_in(x)
        h = self.down1(h, inject["down1"])
        skip1 = h
        h = self.down2(self.downsample1(h), inject["down2"])
        skip2 = h
        h = self.mid(self.downsample2(h), inject["mid"])
        h = h + self.ffn_out(F.silu(self.ffn_in(self.ffn_norm(h))))

        h = self.upsample2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up2(self.skip_proj2(torch.cat([h, skip2], dim=1)), inject["up2"])
        h = self.upsample1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(self.skip_proj1(torch.cat([h, skip1], dim=1)), inject["up1"])
        return self.conv_out(F.silu(self.out_norm(h)))

    def bind_time_cache(self, cache) -> "DenoiserModel":
        cache.check_compatible(self)
        self.time_cache = cache
        return self

    def predict_noise(self, x: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        if self.stripped:
            if self.time_cache is None:
                raise IncompatibleTimeInputError("Stripped model has no bound time cache")
            return self(x, self.time_cache.lookup(t), class_ids)
        return self(x, t, class_ids)


def denoiser_forward(
    model: DenoiserModel,
    x_t: LatentTensor,
    time_feature: Union[int, TimeFeatures],
    cond: Condition,
) -> LatentTensor:
    """Single-latent forward; time_feature is a raw step or cached features."""
    cond.check(model.config.num_classes + 1)
    with torch.no_grad():
        out = model(x_t.data.unsqueeze(0), time_feature, torch.tensor([cond.class_id]))
    return LatentTensor(out[0], timestep_tag=x_t.timestep_tag)


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: DenoiserModel, path: Path, schedule_meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write parameters keyed by registry name plus config and schedule metadata."""
    header = {
        "config": asdict(model.config),
        "stripped": model.stripped,
        "parent_fingerprint": model.parent_fingerprint,
        "fingerprint": model.fingerprint(),
        "registry": {name: info.role.value for name, info in model.registry().items()},
        "schedule": schedule_meta or {},
    }
    return write_tensor_artifact(path, "fpckpt", model.state_dict(), header)


def load_checkpoint(path: Path) -> DenoiserModel:
    header, tensors = read_tensor_artifact(path, "fpckpt")
    model = DenoiserModel(DenoiserConfig(**header["config"]))
    if header["stripped"]:
        model.time_embed = None
        model.time_proj = None
        model.stripped = True
    model.load_state_dict(tensors)
    model.parent_fingerprint = header.get("parent_fingerprint")
    model.schedule_fingerprint = header.get("schedule", {}).get("fingerprint")
    model.eval()
    return model
