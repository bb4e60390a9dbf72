"""Differentiable trilinear resampling of appearance volumes, plus the
appearance encoder/decoder pair that produces and consumes those volumes.

Coordinate convention: a (D, H, W) volume's voxel (z, y, x) = (k, j, i) sits
at normalized coordinates ((2i+1)/W - 1, (2j+1)/H - 1, (2k+1)/D - 1); a
deformation field stores absolute sample coordinates in that space, (x, y, z)
in the last dimension.  Samples outside the cube clamp to the border voxel.

The sampler is written against two exactness contracts that a library
grid-sampler does not guarantee at once under this convention:

* an identity field reproduces the input volume bit-for-bit, and a field
  offset by a whole number of voxels reproduces an exact integer shift — the
  normalize/unnormalize round trip is off by 1 ulp for most sizes, so sample
  indices within 1e-9 of an integer are snapped onto it;
* warping is exactly linear in the volume argument (a weighted gather).
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .util import DTYPE


def _norm(channels: int) -> nn.GroupNorm:
    """Per-sample feature normalization (group count adapts to odd widths)."""
    return nn.GroupNorm(math.gcd(8, channels), channels)

# Absolute tolerance (in voxel-index units) for snapping near-integer sample
# coordinates.  Real sub-voxel offsets are never this small; accumulated
# round-off from the coordinate transform is ~1e-13 at worst for desk sizes.
SNAP_TOL = 1e-9


def identity_field(shape: tuple[int, int, int]) -> torch.Tensor:
    """Identity sampling grid: entry [z, y, x] = normalized (x, y, z) of that voxel."""
    d, h, w = shape
    if d < 1 or h < 1 or w < 1:
        raise ValueError(f"dimensions must be positive, got {shape}")
    zs = (2.0 * torch.arange(d, dtype=DTYPE) + 1.0) / d - 1.0
    ys = (2.0 * torch.arange(h, dtype=DTYPE) + 1.0) / h - 1.0
    xs = (2.0 * torch.arange(w, dtype=DTYPE) + 1.0) / w - 1.0
    gz, gy, gx = torch.meshgrid(zs, ys, xs, indexing="ij")
    return torch.stack([gx, gy, gz], dim=-1)


def warp_volume(volume: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Trilinearly sample ``volume`` (C,D,H,W) at ``field`` (D,H,W,3) coordinates.

    Pull-sampling with border clamping; differentiable in both arguments and
    exactly linear in ``volume``.
    """
    if volume.ndim != 4:
        raise ValueError(f"volume must be (C, D, H, W), got {tuple(volume.shape)}")
    c, d, h, w = volume.shape
    if field.shape != (d, h, w, 3):
        raise ValueError(
            f"field spatial shape {tuple(field.shape)} does not match volume ({d}, {h}, {w}, 3)"
        )
    sizes = torch.tensor([w, h, d], dtype=volume.dtype)
    u = ((field + 1.0) * sizes - 1.0) / 2.0  # continuous voxel indices (x, y, z)
    r = u.round()
    u = torch.where((u - r).abs() <= SNAP_TOL, r, u)
    ux = u[..., 0].clamp(0.0, w - 1.0)
    uy = u[..., 1].clamp(0.0, h - 1.0)
    uz = u[..., 2].clamp(0.0, d - 1.0)

    x0 = ux.floor()
    y0 = uy.floor()
    z0 = uz.floor()
    fx = (ux - x0).unsqueeze(0)
    fy = (uy - y0).unsqueeze(0)
    fz = (uz - z0).unsqueeze(0)
    x0 = x0.long()
    y0 = y0.long()
    z0 = z0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    z1 = (z0 + 1).clamp(max=d - 1)

    gx0, gy0, gz0 = 1.0 - fx, 1.0 - fy, 1.0 - fz
    out = (
        volume[:, z0, y0, x0] * (gz0 * gy0 * gx0)
        + volume[:, z0, y0, x1] * (gz0 * gy0 * fx)
        + volume[:, z0, y1, x0] * (gz0 * fy * gx0)
        + volume[:, z0, y1, x1] * (gz0 * fy * fx)
        + volume[:, z1, y0, x0] * (fz * gy0 * gx0)
        + volume[:, z1, y0, x1] * (fz * gy0 * fx)
        + volume[:, z1, y1, x0] * (fz * fy * gx0)
        + volume[:, z1, y1, x1] * (fz * fy * fx)
    )
    return out


class AppearanceEncoder(nn.Module):
    """Image (3, S, S) -> appearance volume (C, D, S/4, S/4).

    Fully convolutional (so features track the face as it moves) with smooth
    activations and a linear output layer.
    """

    def __init__(self, image_size: int = 64, channels: int = 32, depth: int = 8, width: int = 32):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        self.image_size = image_size
        self.channels = channels
        self.depth = depth
        w1, w2, w3 = width, width * 2, width * 3
        self.net = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), _norm(w1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), _norm(w2), nn.SiLU(),
            nn.Conv2d(w2, w2, 3, padding=1), _norm(w2), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), _norm(w3), nn.SiLU(),
            nn.Conv2d(w3, channels * depth, 3, padding=1),
        )
        self.double()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        single = image.ndim == 3
        if single:
            image = image.unsqueeze(0)
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2] != self.image_size or image.shape[3] != self.image_size:
            raise ValueError(
                f"expected (3, {self.image_size}, {self.image_size}) image(s), got {tuple(image.shape)}"
            )
        b = image.shape[0]
        s4 = self.image_size // 4
        vol = self.net(image.to(DTYPE)).reshape(b, self.channels, self.depth, s4, s4)
        return vol[0] if single else vol


class AppearanceDecoder(nn.Module):
    """Appearance volume (C, D, S/4, S/4) -> image (3, S, S) in [0, 1].

    Depth is folded into channels, decoded by 2-D convolutions with two
    nearest-neighbor upsampling stages and a logistic output.
    """

    def __init__(self, image_size: int = 64, channels: int = 32, depth: int = 8, width: int = 32):
        super().__init__()
        if image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        self.image_size = image_size
        self.channels = channels
        self.depth = depth
        w1, w2, w3 = width, width * 2, width * 3
        self.net = nn.Sequential(
            nn.Conv2d(channels * depth, w3, 3, padding=1), _norm(w3), nn.SiLU(),
            nn.Conv2d(w3, w3, 3, padding=1), _norm(w3), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w3, w2, 3, padding=1), _norm(w2), nn.SiLU(),
            nn.Conv2d(w2, w2, 3, padding=1), _norm(w2), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w2, w1, 3, padding=1), _norm(w1), nn.SiLU(),
            nn.Conv2d(w1, 3, 3, padding=1),
        )
        self.double()

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        single = volume.ndim == 4
        if single:
            volume = volume.unsqueeze(0)
        s4 = self.image_size // 4
        if volume.ndim != 5 or volume.shape[1] != self.channels or volume.shape[2] != self.depth or volume.shape[3] != s4 or volume.shape[4] != s4:
            raise ValueError(
                f"expected ({self.channels}, {self.depth}, {s4}, {s4}) volume(s), got {tuple(volume.shape)}"
            )
        b = volume.shape[0]
        img = torch.sigmoid(self.net(volume.reshape(b, self.channels * self.depth, s4, s4)))
        return img[0] if single else img
