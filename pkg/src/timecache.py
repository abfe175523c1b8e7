"""
Time information precalculation.

The time embedding e_t and every block's projection ep_{t,i} depend only
on the timestep, so they are computed once in full precision for all
t in [0, T), the time layers are removed from the network, and the
stripped model looks the vectors up instead.
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import torch

from .artifact_io import FingerprintMismatchError, read_tensor_artifact, write_tensor_artifact
from .denoiser import BLOCK_IDS, DenoiserModel, LayerRole, TimeFeatures
from .diffcore import NoiseSchedule


@dataclass
class TimeCache:
    """Dense per-timestep tables: emb (T, D) and one (T, width) table per block."""
    T: int
    emb: torch.Tensor
    projections: Dict[str, torch.Tensor]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.emb.shape[0] != self.T:
            raise ValueError(f"emb covers {self.emb.shape[0]} timesteps, expected {self.T}")
        for bid, table in self.projections.items():
            if table.shape[0] != self.T:
                raise ValueError(f"block {bid} covers {table.shape[0]} timesteps, expected {self.T}")

    @property
    def block_ids(self) -> Tuple[str, ...]:
        return tuple(self.projections)

    def entry(self, t: int, block_id: str) -> torch.Tensor:
        return self.projections[block_id][t]

    def lookup(self, t: torch.Tensor) -> TimeFeatures:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.T):
            raise ValueError(f"timesteps outside [0, {self.T})")
        return TimeFeatures(
            timesteps=t,
            emb=self.emb[t],
            projections={bid: table[t] for bid, table in self.projections.items()},
        )

    def nbytes(self) -> int:
        count = self.emb.numel() + sum(table.numel() for table in self.projections.values())
        return count * 4

    def check_compatible(self, model: DenoiserModel, sched: Optional[NoiseSchedule] = None):
        """
        Raises:
            FingerprintMismatchError: cache built from another model or schedule
        """
        expected = self.meta.get("model_fingerprint")
        if expected != model.reference_fingerprint():
            raise FingerprintMismatchError(
                f"Time cache built for model {expected}, got {model.reference_fingerprint()}"
            )
        if sched is not None and self.meta.get("schedule_fingerprint") != sched.fingerprint():
            raise FingerprintMismatchError(
                f"Time cache built for schedule {self.meta.get('schedule_fingerprint')}, "
                f"got {sched.fingerprint()}"
            )


def time_layer_parameter_count(model: DenoiserModel) -> int:
    registry = model.registry()
    return sum(
        registry[name].module.weight.numel() + registry[name].module.bias.numel()
        for name in model.layers_with_role(LayerRole.TIME_EMBEDDING, LayerRole.TIME_PROJECTION)
    )


@torch.no_grad()
def precompute_time_cache(model: DenoiserModel, sched: NoiseSchedule) -> TimeCache:
    """
    Evaluate emb(t) and proj_i(emb(t)) for every t in full precision.

    Raises:
        ValueError: model already stripped
    """
    if model.stripped:
        raise ValueError("Cannot build a time cache from a model whose time layers were stripped")
    rows = [model.time_features(torch.tensor([t])) for t in range(sched.T)]
    emb = torch.cat([r.emb for r in rows]).float().contiguous()
    projections = {
        bid: torch.cat([r.projections[bid] for r in rows]).float().contiguous() for bid in BLOCK_IDS
    }
    meta = {
        "T": sched.T,
        "blocks": list(BLOCK_IDS),
        "emb_dim": int(emb.shape[1]),
        "widths": {bid: int(projections[bid].shape[1]) for bid in BLOCK_IDS},
        "model_fingerprint": model.reference_fingerprint(),
        "schedule_fingerprint": sched.fingerprint(),
    }
    return TimeCache(T=sched.T, emb=emb, projections=projections, meta=meta)


def strip_time_layers(model: DenoiserModel) -> DenoiserModel:
    """
    Copy of the model without time embedding and time projection layers.

    Raises:
        ValueError: model already stripped
    """
    if model.stripped:
        raise ValueError("Time layers were already stripped from this model")
    stripped = copy.deepcopy(model)
    stripped.parent_fingerprint = model.reference_fingerprint()
    stripped.time_embed = None
    stripped.time_proj = None
    stripped.stripped = True
    stripped.time_cache = None
    return stripped


def save_time_cache(cache: TimeCache, path: Path) -> Path:
    tensors = {"emb": cache.emb}
    tensors.update({f"proj.{bid}": table for bid, table in cache.projections.items()})
    return write_tensor_artifact(path, "tcache", tensors, {"meta": cache.meta, "T": cache.T})


def load_time_cache(
    path: Path,
    model: Optional[DenoiserModel] = None,
    sched: Optional[NoiseSchedule] = None,
) -> TimeCache:
    """Load a cache, refusing it when model or schedule fingerprints differ."""
    header, tensors = read_tensor_artifact(path, "tcache")
    meta = header["meta"]
    projections = {bid: tensors[f"proj.{bid}"] for bid in meta["blocks"]}
    cache = TimeCache(T=int(header["T"]), emb=tensors["emb"], projections=projections, meta=meta)
    if model is not None:
        cache.check_compatible(model, sched)
    return cache
