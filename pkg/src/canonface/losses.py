"""The six-term swap training objective, the patch discriminator with R1
gradient penalty, and the pluggable identity/perceptual embedders.

Conventions fixed here (and frozen into unit tests):

* image L1 terms and total-variation are means over pixels, so loss weights
  are resolution-independent; pose/expression terms are true L1 norms (sums),
  so a canonical-space axis-angle residual of (0.1, 0, 0) scores exactly 0.1;
* adversarial terms are summed (not averaged) over the canonical and original
  spaces; a constant-zero discriminator scores hinge loss 2 per space;
* losses operate on a single swap result (no batch axis); the training loop
  averages over its batch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .util import DTYPE


@runtime_checkable
class EmbedderInterface(Protocol):
    """Deterministic image embedder with unit-norm codes and feature taps."""

    def embed(self, image: torch.Tensor) -> torch.Tensor: ...

    def layer_features(self, image: torch.Tensor) -> list[torch.Tensor]: ...


@dataclass
class MotionReadback:
    """Pose (axis-angle 3-vector) and expression matrix read back from an image."""

    pose: torch.Tensor
    expression: torch.Tensor


@dataclass
class SwapOutputs:
    """Everything a single swap produces that the losses consume.

    Canonical-space entries are None when the pipeline runs without canonical
    warping (the "w/o w" ablation); the corresponding loss terms drop out.
    """

    swapped_original: torch.Tensor
    swapped_canonical: torch.Tensor | None
    target_canonical: torch.Tensor | None
    masks: list[torch.Tensor] = field(default_factory=list)
    readback_original: MotionReadback | None = None
    readback_canonical: MotionReadback | None = None
    target_motion: MotionReadback | None = None

    def __post_init__(self):
        imgs = [self.swapped_original, self.swapped_canonical, self.target_canonical]
        shapes = {tuple(i.shape) for i in imgs if i is not None}
        if len(shapes) > 1:
            raise ValueError(f"swap images disagree on resolution: {shapes}")


@dataclass
class LossWeights:
    """Weights of the total objective."""

    lambda_id: float = 10.0
    lambda_p: float = 5.0
    lambda_mo: float = 5.0
    lambda_r: float = 10.0
    lambda_m: float = 1.0
    lambda_g: float = 1.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")


@dataclass
class LossTerms:
    """One value per objective term (tensors during training, floats in logs)."""

    identity: torch.Tensor
    perceptual: torch.Tensor
    motion: torch.Tensor
    reconstruction: torch.Tensor
    generator: torch.Tensor
    mask: torch.Tensor


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(1e-12)


def identity_loss(source_img: torch.Tensor, outputs: SwapOutputs, embedder: EmbedderInterface) -> torch.Tensor:
    """Negative cosine similarity between source and swapped identities.

    -[cos(e_s, e_c) + cos(e_s, e_o)]; the canonical term drops when that
    space is absent.  Bounded in [-2, 2].
    """
    e_s = _unit(embedder.embed(source_img)).detach()
    loss = -torch.dot(e_s, _unit(embedder.embed(outputs.swapped_original)))
    if outputs.swapped_canonical is not None:
        loss = loss - torch.dot(e_s, _unit(embedder.embed(outputs.swapped_canonical)))
    return loss


def feature_distance(a: torch.Tensor, b: torch.Tensor, embedder: EmbedderInterface) -> torch.Tensor:
    fa = embedder.layer_features(a)
    fb = embedder.layer_features(b)
    total = torch.zeros((), dtype=DTYPE)
    for la, lb in zip(fa, fb):
        na = la / la.norm(dim=0, keepdim=True).clamp_min(1e-10)
        nb = lb / lb.norm(dim=0, keepdim=True).clamp_min(1e-10)
        total = total + (na - nb).pow(2).sum(dim=0).mean()
    return total / len(fa)


def perceptual_loss(outputs: SwapOutputs, target_img: torch.Tensor, embedder: EmbedderInterface) -> torch.Tensor:
    """Feature-space distance in both spaces.

    For each space, features of every embedder layer (the raw image counts
    as layer zero, which makes the loss strictly positive for any differing
    image pair) are channel-normalized per position; the per-layer mean
    squared difference is averaged over layers and summed over spaces.
    """
    loss = feature_distance(outputs.swapped_original, target_img, embedder)
    if outputs.swapped_canonical is not None and outputs.target_canonical is not None:
        loss = loss + feature_distance(outputs.swapped_canonical, outputs.target_canonical, embedder)
    return loss


def motion_loss(outputs: SwapOutputs) -> torch.Tensor:
    """Motion preservation: canonical readbacks must vanish, original ones
    must match the target's.

    ||P_c||_1 + ||E_c||_1 + ||P_o - P_t||_1 + ||E_o - E_t||_1 with true L1
    norms (sums of absolute entries).
    """
    if outputs.readback_original is None or outputs.target_motion is None:
        raise ValueError("motion loss needs original-space and target readbacks")
    tgt = outputs.target_motion
    ro = outputs.readback_original
    loss = (ro.pose - tgt.pose.detach()).abs().sum() + (ro.expression - tgt.expression.detach()).abs().sum()
    if outputs.readback_canonical is not None:
        rc = outputs.readback_canonical
        loss = loss + rc.pose.abs().sum() + rc.expression.abs().sum()
    return loss


def reconstruction_loss(outputs: SwapOutputs, target_img: torch.Tensor, same_identity: bool) -> torch.Tensor:
    """Pixel L1 in both spaces when source and target share an identity, else 0."""
    if not same_identity:
        return torch.zeros((), dtype=DTYPE)
    loss = (outputs.swapped_original - target_img).abs().mean()
    if outputs.swapped_canonical is not None and outputs.target_canonical is not None:
        loss = loss + (outputs.swapped_canonical - outputs.target_canonical).abs().mean()
    return loss


class PatchDiscriminator(nn.Module):
    """Small patch classifier used by the hinge adversarial objective."""

    def __init__(self, image_size: int = 64, width: int = 32):
        super().__init__()
        self.image_size = image_size
        w1, w2, w3 = width, width * 2, width * 3
        self.net = nn.Sequential(
            nn.Conv2d(3, w1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w3, 1, 3, padding=1),
        )
        self.double()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            raise ValueError(f"expected {self.image_size}px images, got {tuple(image.shape)}")
        return self.net(image)


R1_GAMMA = 10.0


def adversarial_pair(
    outputs: SwapOutputs,
    real_img: torch.Tensor,
    discriminator: nn.Module,
    r1_gamma: float = R1_GAMMA,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge adversarial losses, summed over the canonical and original spaces.

    Returns (generator_loss, discriminator_loss).  The discriminator side is
    mean(relu(1 - D(real))) + mean(relu(1 + D(fake))) per space plus an R1
    penalty (gamma/2) * ||grad_x D(real)||^2 (per-sample squared gradient
    norm); the generator side is -mean(D(fake)) per space.  Real data for the
    canonical space is the target's own canonical decode.
    """
    pairs = [(outputs.swapped_original, real_img)]
    if outputs.swapped_canonical is not None and outputs.target_canonical is not None:
        pairs.append((outputs.swapped_canonical, outputs.target_canonical))
    g_loss = torch.zeros((), dtype=DTYPE)
    d_loss = torch.zeros((), dtype=DTYPE)
    for fake, real in pairs:
        real_in = real.detach().clone().requires_grad_(True)
        d_real = discriminator(real_in)
        grad = torch.autograd.grad(d_real.sum(), real_in, create_graph=True)[0]
        r1 = 0.5 * r1_gamma * grad.pow(2).sum()
        d_loss = d_loss + F.relu(1.0 - d_real).mean() + F.relu(1.0 + discriminator(fake.detach())).mean() + r1
        g_loss = g_loss - discriminator(fake).mean()
    return g_loss, d_loss


def total_variation(mask: torch.Tensor) -> torch.Tensor:
    """Mean-per-pixel total variation: forward-difference absolute sums / (H*W).

    A 2x2 binary checkerboard has two horizontal plus two vertical unit
    differences, so its normalized TV is (2 + 2) / 4 = 1.
    """
    if mask.ndim == 3:
        mask = mask[0] if mask.shape[0] == 1 else mask.squeeze(0)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got {tuple(mask.shape)}")
    h, w = mask.shape
    tv = (mask[:, 1:] - mask[:, :-1]).abs().sum() + (mask[1:, :] - mask[:-1, :]).abs().sum()
    return tv / (h * w)


def mask_loss(masks: list[torch.Tensor], gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean over blocks of [TV(A) + mean |A - A_GT|].

    The ground-truth mask is average-pooled to each block's resolution.
    """
    if len(masks) == 0:
        raise ValueError("need at least one mask")
    if gt_mask.ndim != 2:
        raise ValueError(f"ground-truth mask must be (H, W), got {tuple(gt_mask.shape)}")
    total = torch.zeros((), dtype=DTYPE)
    for m in masks:
        m2 = m.reshape(m.shape[-2], m.shape[-1])
        gt = gt_mask.to(DTYPE)
        if gt.shape != m2.shape:
            gt = F.adaptive_avg_pool2d(gt.unsqueeze(0).unsqueeze(0), m2.shape)[0, 0]
        total = total + total_variation(m2) + (m2 - gt).abs().mean()
    return total / len(masks)


def total_loss(terms: LossTerms, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of all terms (adversarial generator term at weight lambda_g)."""
    return (
        weights.lambda_id * terms.identity
        + weights.lambda_p * terms.perceptual
        + weights.lambda_mo * terms.motion
        + weights.lambda_r * terms.reconstruction
        + weights.lambda_g * terms.generator
        + weights.lambda_m * terms.mask
    )


def random_orthogonal(dim: int, seed: int = 7321) -> torch.Tensor:
    """Frozen random orthogonal matrix (QR of a seeded Gaussian)."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diagonal(r))
    return torch.as_tensor(q, dtype=DTYPE)


class LatentOracleEmbedder:
    """Identity embedder that reads ground-truth latents through a frozen
    random orthogonal projection.

    It can embed any identity code directly, and any image that was
    registered with its code (lookup by exact pixel content) — rendered
    frames are bit-deterministic, so registration is a sound oracle for
    clean renders.  Generated frames are outside its domain by construction;
    use a trained recognizer for those.
    """

    def __init__(self, dim: int = 16, seed: int = 7321):
        self.projection = random_orthogonal(dim, seed=seed)
        self._registry: dict[bytes, torch.Tensor] = {}

    def embed_code(self, identity_code) -> torch.Tensor:
        code = torch.as_tensor(np.asarray(identity_code), dtype=DTYPE).reshape(-1)
        return _unit(self.projection @ code)

    @staticmethod
    def _key(image) -> bytes:
        arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
        return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).digest()

    def register(self, image, identity_code) -> None:
        self._registry[self._key(image)] = self.embed_code(identity_code)

    def embed(self, image) -> torch.Tensor:
        key = self._key(image)
        if key not in self._registry:
            raise KeyError("image was not registered with the latent oracle")
        return self._registry[key]

    def layer_features(self, image) -> list[torch.Tensor]:
        raise NotImplementedError("the latent oracle has no feature taps")


class IdentityRecognizer(nn.Module):
    """Convolutional identity embedder trained toward the latent oracle.

    Supervised to reproduce the orthogonally projected ground-truth identity
    code from pixels, then frozen; this gives the identity loss a
    differentiable path from generated images while preserving the oracle's
    cosine geometry.
    """

    def __init__(self, image_size: int = 64, dim: int = 16, width: int = 24):
        super().__init__()
        self.image_size = image_size
        self.dim = dim
        w1, w2, w3 = width, width * 2, width * 4
        self.c1 = nn.Sequential(nn.Conv2d(3, w1, 3, stride=2, padding=1), nn.SiLU())
        self.c2 = nn.Sequential(nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.SiLU())
        self.c3 = nn.Sequential(nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.SiLU())
        self.head = nn.Linear(w3, dim)
        self.double()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        single = image.ndim == 3
        if single:
            image = image.unsqueeze(0)
        if image.shape[-1] != self.image_size or image.shape[-2] != self.image_size:
            raise ValueError(f"expected {self.image_size}px images, got {tuple(image.shape)}")
        h = self.c3(self.c2(self.c1(image.to(DTYPE))))
        out = self.head(h.mean(dim=(2, 3)))
        return out[0] if single else out

    def embed(self, image) -> torch.Tensor:
        return _unit(self.forward(image))

    def layer_features(self, image) -> list[torch.Tensor]:
        x = image.to(DTYPE)
        f1 = self.c1(x.unsqueeze(0))
        f2 = self.c2(f1)
        f3 = self.c3(f2)
        return [x, f1[0], f2[0], f3[0]]


class PerceptualEmbedder:
    """Feature taps from the frozen appearance encoder, raw image as layer 0."""

    def __init__(self, encoder: nn.Module):
        self.encoder = encoder

    def layer_features(self, image: torch.Tensor) -> list[torch.Tensor]:
        feats = [image.to(DTYPE)]
        x = image.to(DTYPE).unsqueeze(0)
        for layer in self.encoder.net:
            x = layer(x)
            if isinstance(layer, nn.SiLU):
                feats.append(x[0])
        return feats

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return _unit(self.layer_features(image)[-1].mean(dim=(1, 2)))
