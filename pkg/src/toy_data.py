"""
Procedural 16x16 single-channel images: anti-aliased discs and squares whose
position and size depend on the class. Stands in for the image data the
floating-point denoiser is trained on.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F


# (shape, center_y, center_x, radius) per class; coordinates in pixels of a 16x16 canvas
_CLASS_LAYOUT = (
    ("disc", 4.5, 4.5, 3.0),
    ("disc", 4.5, 11.5, 3.5),
    ("disc", 11.5, 4.5, 2.5),
    ("disc", 11.5, 11.5, 3.0),
    ("disc", 8.0, 8.0, 4.5),
    ("square", 4.5, 4.5, 2.5),
    ("square", 4.5, 11.5, 3.0),
    ("square", 11.5, 4.5, 2.0),
    ("square", 11.5, 11.5, 2.5),
    ("square", 8.0, 8.0, 4.0),
)


@dataclass
class SyntheticShapes:
    """
    Seeded generator of class-conditional shape images in [-1, 1].

    Layouts are defined for a 16-pixel canvas and scaled to image_size.
    """
    num_classes: int = 10
    image_size: int = 16
    supersample: int = 4
    jitter: float = 1.0
    radius_jitter: float = 0.3

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(_CLASS_LAYOUT):
            raise ValueError(f"num_classes must be in [1, {len(_CLASS_LAYOUT)}], got {self.num_classes}")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")

    @classmethod
    def from_config(cls, data: Dict[str, object], model: Dict[str, object]) -> "SyntheticShapes":
        return cls(
            num_classes=int(data["num_classes"]),
            image_size=int(model["image_size"]),
            supersample=int(data["supersample"]),
            jitter=float(data["jitter"]),
        )

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (1, self.image_size, self.image_size)

    def render(self, class_ids: torch.Tensor, offsets: torch.Tensor, radius_delta: torch.Tensor) -> torch.Tensor:
        """
        Rasterize shapes with box-filter anti-aliasing.

        Args:
            class_ids: (B,) long
            offsets: (B, 2) center offsets in canvas pixels
            radius_delta: (B,) radius offsets in canvas pixels

        Returns:
            (B, 1, H, W) coverage in [0, 1]
        """
        scale = self.image_size / 16.0
        layout = torch.tensor([[cy, cx, r] for _, cy, cx, r in _CLASS_LAYOUT], dtype=torch.float32)
        is_disc = torch.tensor([kind == "disc" for kind, *_ in _CLASS_LAYOUT])

        params = layout[class_ids]
        cy = (params[:, 0] + offsets[:, 0]) * scale
        cx = (params[:, 1] + offsets[:, 1]) * scale
        radius = ((params[:, 2] + radius_delta) * scale).clamp_min(0.5)

        n = self.image_size * self.supersample
        coords = (torch.arange(n, dtype=torch.float32) + 0.5) / self.supersample
        yy = coords.view(1, n, 1) - cy.view(-1, 1, 1)
        xx = coords.view(1, 1, n) - cx.view(-1, 1, 1)
        r = radius.view(-1, 1, 1)

        disc = (yy ** 2 + xx ** 2) <= r ** 2
        square = torch.maximum(yy.abs(), xx.abs()) <= r
        mask = torch.where(is_disc[class_ids].view(-1, 1, 1), disc, square).float()
        return F.avg_pool2d(mask.unsqueeze(1), kernel_size=self.supersample)

    def sample(
        self,
        n: int,
        generator: torch.Generator,
        class_ids: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Draw n images.

        Returns:
            (images (n, 1, H, W) in [-1, 1], class_ids (n,))
        """
        if class_ids is None:
            class_ids = torch.randint(0, self.num_classes, (n,), generator=generator)
        else:
            class_ids = class_ids.long()
        offsets = (torch.rand((n, 2), generator=generator) * 2 - 1) * self.jitter
        radius_delta = (torch.rand((n,), generator=generator) * 2 - 1) * self.radius_jitter
        coverage = self.render(class_ids, offsets, radius_delta)
        return coverage * 2 - 1, class_ids


def to_unit_range(images: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] images to [0, 1], clamping sampler overshoot."""
    return ((images + 1) / 2).clamp(0.0, 1.0)
