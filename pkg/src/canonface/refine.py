"""Volumetric refinement of swapped canonical features.

A one-level 3-D U-Net producing a residual: two conv stages, a single
average-pool downsampling, two conv stages back up with a skip concatenation,
and a zero-initialized output convolution, so a freshly built refiner is an
exact identity and the pipeline can treat bypassing it ("without refinement"
ablation) and step-0 behavior identically.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class VolumeRefiner(nn.Module):
    """Residual 3-D U-Net over (C, D, H, W) volumes; D, H, W must be even."""

    def __init__(self, channels: int, width: int = 16):
        super().__init__()
        self.channels = channels
        w1, w2 = width, width * 2
        self.enc = nn.Sequential(
            nn.Conv3d(channels, w1, 3, padding=1), nn.SiLU(),
            nn.Conv3d(w1, w1, 3, padding=1), nn.SiLU(),
        )
        self.mid = nn.Sequential(
            nn.Conv3d(w1, w2, 3, padding=1), nn.SiLU(),
            nn.Conv3d(w2, w2, 3, padding=1), nn.SiLU(),
        )
        self.dec = nn.Sequential(
            nn.Conv3d(w1 + w2, w1, 3, padding=1), nn.SiLU(),
            nn.Conv3d(w1, channels, 3, padding=1),
        )
        # zero-init the residual output: refine(v) == v at initialization
        nn.init.zeros_(self.dec[-1].weight)
        nn.init.zeros_(self.dec[-1].bias)
        self.double()

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        single = volume.ndim == 4
        if single:
            volume = volume.unsqueeze(0)
        if volume.ndim != 5 or volume.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, D, H, W) volume, got {tuple(volume.shape)}")
        if any(s % 2 for s in volume.shape[2:]):
            raise ValueError(f"D, H, W must be even, got {tuple(volume.shape[2:])}")
        skip = self.enc(volume)
        mid = self.mid(F.avg_pool3d(skip, 2))
        up = F.interpolate(mid, scale_factor=2, mode="nearest")
        res = self.dec(torch.cat([skip, up], dim=1))
        out = volume + res
        return out[0] if single else out


def refine_volume(volume: torch.Tensor, refiner: VolumeRefiner) -> torch.Tensor:
    """Apply a refiner: ``volume + residual(volume)``."""
    return refiner(volume)
