"""
Distillation objectives against the FP teacher.

L_out is the MSE between teacher and student noise predictions; L_sen sums
per-layer feature MSEs over the sensitive layers (shortcut projections and
feed-forward projections). The final loss is their unweighted sum.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import DenoiserModel, LayerRole


# Architecture profile -> roles that receive feature distillation.
# None marks a profile that is named but has no model in this repo.
SENSITIVE_PROFILES: Dict[str, Optional[Tuple[LayerRole, ...]]] = {
    "unet": (LayerRole.SHORTCUT, LayerRole.FFN),
    "none": (),
    "mmdit": None,
}

_PROFILES_REQUIRING_LAYERS = {"unet"}


@dataclass(frozen=True)
class SensitiveLayerSet:
    layer_names: Tuple[str, ...] = ()

    def __iter__(self):
        return iter(self.layer_names)

    def __len__(self) -> int:
        return len(self.layer_names)

    def validate(self, model: DenoiserModel) -> "SensitiveLayerSet":
        registry = model.registry()
        unknown = [name for name in self.layer_names if name not in registry]
        if unknown:
            raise ValueError(f"Sensitive layers not in model registry: {unknown}")
        return self


@dataclass
class FeatureCapture:
    """Layer outputs recorded during one forward pass."""
    features: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.features[name]

    def __contains__(self, name: str) -> bool:
        return name in self.features


def select_sensitive_layers(model: DenoiserModel, arch_profile: str = "unet") -> SensitiveLayerSet:
    """
    Registry-ordered layers whose role the profile marks sensitive.

    Raises:
        ValueError: unknown profile, stub profile, or an empty result where
            the profile requires layers
    """
    if arch_profile not in SENSITIVE_PROFILES:
        raise ValueError(f"Unknown sensitive-layer profile {arch_profile!r}; known: {sorted(SENSITIVE_PROFILES)}")
    roles = SENSITIVE_PROFILES[arch_profile]
    if roles is None:
        raise ValueError(f"Profile {arch_profile!r} is declared but no such architecture exists here")
    names = tuple(model.layers_with_role(*roles)) if roles else ()
    if not names and arch_profile in _PROFILES_REQUIRING_LAYERS:
        raise ValueError(f"Profile {arch_profile!r} matched no layers in the model registry")
    return SensitiveLayerSet(names)


@contextmanager
def capture_features(model: nn.Module, layers: Sequence[str]) -> Iterator[FeatureCapture]:
    """Record the outputs of the named layers for forwards run inside the block."""
    capture = FeatureCapture()
    modules = dict(model.named_modules())
    handles = []

    def _hook(name):
        def _record(module, inputs, output):
            capture.features[name] = output
        return _record

    for name in layers:
        handles.append(modules[name].register_forward_hook(_hook(name)))
    try:
        yield capture
    finally:
        for handle in handles:
            handle.remove()


def loss_output(eps_fp: torch.Tensor, eps_q: torch.Tensor) -> torch.Tensor:
    if eps_fp.shape != eps_q.shape:
        raise ValueError(f"Output shapes differ: {tuple(eps_fp.shape)} vs {tuple(eps_q.shape)}")
    return F.mse_loss(eps_q, eps_fp)


def loss_sensitive(
    cap_fp: FeatureCapture,
    cap_q: FeatureCapture,
    layers: SensitiveLayerSet,
) -> torch.Tensor:
    """
    Sum over sensitive layers of the per-layer feature MSE.

    Raises:
        ValueError: a layer is missing from either capture, or shapes differ
    """
    total = torch.zeros(())
    for name in layers:
        if name not in cap_fp or name not in cap_q:
            raise ValueError(f"No captured feature for sensitive layer {name}")
        f_fp, f_q = cap_fp[name], cap_q[name]
        if f_fp.shape != f_q.shape:
            raise ValueError(f"Feature shapes differ at {name}: {tuple(f_fp.shape)} vs {tuple(f_q.shape)}")
        total = total + F.mse_loss(f_q, f_fp)
    return total


def total_loss(l_out: torch.Tensor, l_sen: torch.Tensor) -> torch.Tensor:
    """
    L_out + L_sen.

    Raises:
        FloatingPointError: either term is NaN or infinite
    """
    if not (torch.isfinite(l_out) and torch.isfinite(l_sen)):
        raise FloatingPointError(f"Non-finite loss term: l_out={float(l_out)}, l_sen={float(l_sen)}")
    return l_out + l_sen
