"""Partial identity modulation: inject a source identity into canonical
appearance features through a demodulated, identity-scaled convolution branch,
fused with an unmodified convolution branch under a predicted soft spatial
mask, and stacked as several blocks.

The canonical appearance volume (C, D, H, W) enters with its depth folded
into channels (C*D-channel 2-D feature map) and is reshaped back afterwards.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def standard_conv(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Same-padded 2-D convolution, no bias: the identity-free branch."""
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 != 1:
        raise ValueError(f"weight must be (C_out, C_in, k, k) with odd k, got {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    return F.conv2d(x, weight, padding=weight.shape[2] // 2)


def modulated_conv(x: torch.Tensor, weight: torch.Tensor, s_id: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """Identity-modulated, demodulated convolution.

    Per sample, effective weights are W'[o,i] = s_id[i] * W[o,i] /
    sqrt(sum_{i,k,k} (s_id[i] * W[o,i])^2 + eps) — one normalizer per output
    channel — followed by the same-padded convolution.  For eps -> 0 the
    output is invariant to positive rescaling of s_id, and every output
    channel's effective weight has unit L2 norm.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
    b, c_in, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input {c_in} vs weight {weight.shape[1]}")
    if s_id.ndim == 1:
        s_id = s_id.unsqueeze(0).expand(b, -1)
    if s_id.shape != (b, c_in):
        raise ValueError(f"s_id must be ({b}, {c_in}) or ({c_in},), got {tuple(s_id.shape)}")
    # (B, C_out, C_in, k, k): modulate input channels, demodulate per output channel
    w_mod = weight.unsqueeze(0) * s_id[:, None, :, None, None]
    denom = torch.sqrt(w_mod.pow(2).sum(dim=(2, 3, 4), keepdim=True) + epsilon)
    w_eff = w_mod / denom
    # grouped convolution runs all per-sample weights in one call
    out = F.conv2d(
        x.reshape(1, b * c_in, h, w),
        w_eff.reshape(b * c_out, c_in, weight.shape[2], weight.shape[3]),
        padding=weight.shape[2] // 2,
        groups=b,
    )
    return out.reshape(b, c_out, h, w)


class PimBlock(nn.Module):
    """One fusion block: modulated and plain convolution branches mixed by a
    predicted mask, then a leaky rectifier (slope 0.2).

    The identity code is a per-input-channel positive scale read off the
    source identity embedding by a per-block affine map under softplus; with
    a zero embedding the code is exactly softplus of the block's bias.
    """

    def __init__(self, channels: int, embed_dim: int, kernel: int = 3, mask_hidden: int = 16):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.channels = channels
        self.weight = nn.Parameter(
            torch.randn(channels, channels, kernel, kernel) / math.sqrt(channels * kernel * kernel)
        )
        self.id_affine = nn.Linear(embed_dim, channels)
        # softplus(bias) = 1 at init so modulation starts neutral
        nn.init.normal_(self.id_affine.weight, std=0.2)
        nn.init.constant_(self.id_affine.bias, math.log(math.e - 1.0))
        self.mask_head = nn.Sequential(
            nn.Conv2d(channels, mask_hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(mask_hidden, 1, 3, padding=1),
        )
        self.double()

    def identity_code(self, embedding: torch.Tensor) -> torch.Tensor:
        """Strictly positive per-channel scales from the identity embedding."""
        if embedding.shape[-1] != self.id_affine.in_features:
            raise ValueError(
                f"embedding dim {embedding.shape[-1]} != configured {self.id_affine.in_features}"
            )
        return F.softplus(self.id_affine(embedding))

    def predict_mask(self, x: torch.Tensor) -> torch.Tensor:
        """Soft spatial mask in (0, 1), shape (B, 1, H, W)."""
        return torch.sigmoid(self.mask_head(x))

    def forward(
        self,
        x: torch.Tensor,
        s_id: torch.Tensor,
        force_mask=None,
        return_parts: bool = False,
    ):
        """Fuse the branches: leaky(A * F_id + (1 - A) * F_normal).

        ``force_mask`` overrides the predicted mask: "zeros", "ones", or an
        explicit tensor (the all-ones override is the global-modulation
        ablation).  ``return_parts`` additionally returns (mask, f_id,
        f_normal, pre_activation).
        """
        f_normal = standard_conv(x, self.weight)
        f_id = modulated_conv(x, self.weight, s_id)
        if force_mask is None:
            mask = self.predict_mask(x)
        elif isinstance(force_mask, str):
            if force_mask == "zeros":
                mask = torch.zeros_like(f_normal[:, :1])
            elif force_mask == "ones":
                mask = torch.ones_like(f_normal[:, :1])
            else:
                raise ValueError(f"unknown mask override {force_mask!r}")
        else:
            mask = force_mask
        pre = mask * f_id + (1.0 - mask) * f_normal
        out = F.leaky_relu(pre, negative_slope=0.2)
        if return_parts:
            return out, mask, f_id, f_normal, pre
        return out


class PimStack(nn.Module):
    """Several PimBlocks applied to a depth-folded canonical volume."""

    def __init__(
        self,
        channels: int,
        depth: int,
        embed_dim: int,
        n_blocks: int = 4,
        kernel: int = 3,
        mask_hidden: int = 16,
    ):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("need at least one block")
        self.channels = channels
        self.depth = depth
        self.blocks = nn.ModuleList(
            PimBlock(channels * depth, embed_dim, kernel=kernel, mask_hidden=mask_hidden)
            for _ in range(n_blocks)
        )

    def aggregate_identity(self, embedding: torch.Tensor) -> list[torch.Tensor]:
        """One strictly positive identity code per block."""
        return [blk.identity_code(embedding) for blk in self.blocks]

    def pim_apply(
        self,
        volume: torch.Tensor,
        embedding: torch.Tensor,
        force_mask=None,
        collect_masks: bool = False,
    ):
        """Run all blocks over a (C, D, H, W) or (B, C, D, H, W) volume.

        Returns the transformed volume, plus the per-block predicted masks
        when ``collect_masks`` is set.
        """
        single = volume.ndim == 4
        if single:
            volume = volume.unsqueeze(0)
        if volume.ndim != 5 or volume.shape[1] != self.channels or volume.shape[2] != self.depth:
            raise ValueError(
                f"expected (B, {self.channels}, {self.depth}, H, W) volume, got {tuple(volume.shape)}"
            )
        b, c, d, h, w = volume.shape
        if embedding.ndim == 1:
            embedding = embedding.unsqueeze(0).expand(b, -1)
        x = volume.reshape(b, c * d, h, w)
        masks = []
        for blk in self.blocks:
            s_id = blk.identity_code(embedding)
            if collect_masks:
                x, mask, _, _, _ = blk(x, s_id, force_mask=force_mask, return_parts=True)
                masks.append(mask)
            else:
                x = blk(x, s_id, force_mask=force_mask)
        out = x.reshape(b, c, d, h, w)
        if single:
            out = out[0]
            masks = [m[0] for m in masks]
        if collect_masks:
            return out, masks
        return out

    def forward(self, volume, embedding, force_mask=None):
        return self.pim_apply(volume, embedding, force_mask=force_mask)
