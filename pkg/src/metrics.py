"""
Image metrics: SSIM, Fréchet feature distance and a perceptual feature
distance, the last two over a small CNN trained on the synthetic shapes.

The in-repo extractor stands in for Inception (FID) and the LPIPS network,
so numbers are only comparable within this project.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from shared.utils import derive_seed, log

from .artifact_io import fingerprint_tensors, read_tensor_artifact, write_tensor_artifact
from .toy_data import SyntheticShapes, to_unit_range


SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# =============================================================================
# SSIM
# =============================================================================

def _as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 2:
        return image[None, None]
    if image.dim() == 3:
        return image[None]
    return image


def ssim_batch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """
    Per-image SSIM for (B, C, H, W) batches in [0, data_range].

    Uniform 7x7 window, sample covariance, statistics only where the window
    fits inside the image; channels are averaged.

    Raises:
        ValueError: shape mismatch or images smaller than the window
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    a = a.to(torch.float64)
    b = b.to(torch.float64)

    n = SSIM_WINDOW * SSIM_WINDOW
    cov_norm = n / (n - 1)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def mean(x):
        return F.avg_pool2d(x, SSIM_WINDOW, stride=1)

    ux, uy = mean(a), mean(b)
    vx = cov_norm * (mean(a * a) - ux * ux)
    vy = cov_norm * (mean(b * b) - uy * uy)
    vxy = cov_norm * (mean(a * b) - ux * uy)

    numerator = (2 * ux * uy + c1) * (2 * vxy + c2)
    denominator = (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2)
    return (numerator / denominator).mean(dim=(1, 2, 3))


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    return float(ssim_batch(a, b, data_range).mean())


# =============================================================================
# FRÉCHET DISTANCE
# =============================================================================

def frechet_distance(
    mu1: np.ndarray,
    sigma1: np.ndarray,
    mu2: np.ndarray,
    sigma2: np.ndarray,
    shrinkage: float = 1e-6,
) -> float:
    """
    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) with eps*I added to both covariances.

    Raises:
        ValueError: a covariance is not positive semi-definite after shrinkage
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    offset = shrinkage * np.eye(mu1.shape[0])
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64)) + offset
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64)) + offset

    for name, sigma in (("sigma1", sigma1), ("sigma2", sigma2)):
        lowest = float(np.linalg.eigvalsh((sigma + sigma.T) / 2).min())
        if lowest < -1e-8:
            raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {lowest:.3e})")

    delta_mu = mu1 - mu2
    sqrtm_sigma = scipy.linalg.sqrtm(sigma1.dot(sigma2))
    if np.iscomplexobj(sqrtm_sigma):
        if not np.allclose(np.diagonal(sqrtm_sigma).imag, 0, atol=1e-3):
            raise ValueError(f"Matrix square root has imaginary component {np.abs(sqrtm_sigma.imag).max():.3e}")
        sqrtm_sigma = sqrtm_sigma.real

    fd = delta_mu.dot(delta_mu) + np.trace(sigma1 + sigma2 - 2 * sqrtm_sigma)
    return float(max(fd, 0.0))


def frechet_from_features(
    features1: np.ndarray,
    features2: np.ndarray,
    shrinkage: float = 1e-6,
) -> float:
    features1 = np.asarray(features1, dtype=np.float64)
    features2 = np.asarray(features2, dtype=np.float64)
    if len(features1) < 2 or len(features2) < 2:
        raise ValueError("Fréchet distance needs at least two samples per set")
    return frechet_distance(
        features1.mean(axis=0), np.cov(features1, rowvar=False),
        features2.mean(axis=0), np.cov(features2, rowvar=False),
        shrinkage=shrinkage,
    )


# =============================================================================
# FEATURE EXTRACTOR
# =============================================================================

@dataclass
class FeatureExtractorConfig:
    num_classes: int = 10
    channels: Tuple[int, int, int] = (16, 32, 64)


class FeatureExtractor(nn.Module):
    """Three conv stages, global pooling and a linear classifier; inputs in [0, 1]."""

    def __init__(self, config: FeatureExtractorConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(1, c1, 3, padding=1), nn.SiLU()),
            nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(c1, c2, 3, padding=1), nn.SiLU()),
            nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(c2, c3, 3, padding=1), nn.SiLU()),
        ])
        self.classifier = nn.Linear(c3, config.num_classes)

    @property
    def feature_dim(self) -> int:
        return self.config.channels[-1]

    def feature_maps(self, x: torch.Tensor) -> List[torch.Tensor]:
        maps = []
        h = x * 2 - 1
        for stage in self.stages:
            h = stage(h)
            maps.append(h)
        return maps

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate (globally pooled) features."""
        return self.feature_maps(x)[-1].mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.state_dict())


def train_feature_extractor(
    data: SyntheticShapes,
    steps: int = 400,
    batch_size: int = 128,
    lr: float = 2e-3,
    seed: int = 0,
    verbose: bool = False,
) -> FeatureExtractor:
    """Train the classifier on clean synthetic images, then freeze it."""
    torch.manual_seed(derive_seed(seed, "fx_init"))
    fx = FeatureExtractor(FeatureExtractorConfig(num_classes=data.num_classes))
    generator = torch.Generator().manual_seed(derive_seed(seed, "fx_train"))
    optimizer = torch.optim.Adam(fx.parameters(), lr=lr)
    fx.train()
    loss = torch.zeros(())
    for _ in tqdm(range(steps), desc="feature extractor", disable=not verbose):
        images, class_ids = data.sample(batch_size, generator)
        loss = F.cross_entropy(fx(to_unit_range(images)), class_ids)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    log(f"Feature extractor trained: final loss {float(loss):.4f}", "INFO", verbose)
    return fx.freeze()


@torch.no_grad()
def extract_features(images: torch.Tensor, fx: FeatureExtractor, batch_size: int = 256) -> np.ndarray:
    chunks = [fx.features(images[i:i + batch_size].float()) for i in range(0, len(images), batch_size)]
    return torch.cat(chunks).to(torch.float64).numpy()


def frechet_feature_distance(
    set_q: torch.Tensor,
    set_fp: torch.Tensor,
    fx: FeatureExtractor,
    shrinkage: float = 1e-6,
) -> float:
    """Fréchet distance between penultimate features of two image sets in [0, 1]."""
    return frechet_from_features(extract_features(set_q, fx), extract_features(set_fp, fx), shrinkage)


# =============================================================================
# PERCEPTUAL FEATURE DISTANCE
# =============================================================================

def _unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt((feat ** 2).sum(dim=1, keepdim=True))
    return feat / (norm + eps)


@torch.no_grad()
def perceptual_feature_distance_batch(
    a: torch.Tensor,
    b: torch.Tensor,
    fx: FeatureExtractor,
    layers: Sequence[int] = (0, 1, 2),
) -> torch.Tensor:
    """
    Per-pair mean over layers of the channel-normalized squared feature
    difference, summed over channels and averaged over positions.

    Raises:
        ValueError: shape mismatch
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"PFD inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    maps_a = fx.feature_maps(a.float())
    maps_b = fx.feature_maps(b.float())
    per_layer = []
    for idx in layers:
        diff = (_unit_normalize(maps_a[idx].double()) - _unit_normalize(maps_b[idx].double())) ** 2
        per_layer.append(diff.sum(dim=1).mean(dim=(1, 2)))
    return torch.stack(per_layer).mean(dim=0)


def perceptual_feature_distance(
    a: torch.Tensor,
    b: torch.Tensor,
    fx: FeatureExtractor,
    layers: Sequence[int] = (0, 1, 2),
) -> float:
    return float(perceptual_feature_distance_batch(a, b, fx, layers).mean())


# =============================================================================
# PERSISTENCE
# =============================================================================

def save_feature_extractor(fx: FeatureExtractor, path: Path) -> Path:
    header = {
        "config": {"num_classes": fx.config.num_classes, "channels": list(fx.config.channels)},
        "fingerprint": fx.fingerprint(),
    }
    return write_tensor_artifact(path, "fxckpt", fx.state_dict(), header)


def load_feature_extractor(path: Path) -> FeatureExtractor:
    header, tensors = read_tensor_artifact(path, "fxckpt")
    config = header["config"]
    fx = FeatureExtractor(FeatureExtractorConfig(config["num_classes"], tuple(config["channels"])))
    fx.load_state_dict(tensors)
    return fx.freeze()
