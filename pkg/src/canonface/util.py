"""Shared numerics: dtype policy, image conversion, PSNR, finite-difference checks.

Everything in this package runs in float64 on CPU.  That is deliberate: the
whole point of the synthetic-world setup is that numerical claims (gradient
correctness, bit-exact reproducibility, closed-form metric values) can be
checked to tight tolerances, and float32 noise would eat most of the margin.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch RNGs in one place."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def as_image_tensor(image) -> torch.Tensor:
    """Coerce an image to a (3, H, W) float64 tensor in [0, 1].

    Accepts (H, W, 3) numpy arrays (float in [0,1] or uint8/uint16) and
    (3, H, W) or (H, W, 3) torch tensors.
    """
    if isinstance(image, np.ndarray):
        arr = image
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        elif arr.dtype == np.uint16:
            arr = arr.astype(np.float64) / 65535.0
        t = torch.as_tensor(arr, dtype=DTYPE)
    elif isinstance(image, torch.Tensor):
        t = image.to(DTYPE)
    else:
        raise TypeError(f"unsupported image type {type(image)!r}")
    if t.ndim != 3:
        raise ValueError(f"expected 3 dims, got shape {tuple(t.shape)}")
    if t.shape[-1] == 3 and t.shape[0] != 3:
        t = t.permute(2, 0, 1)
    if t.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {tuple(t.shape)}")
    return t.contiguous()


def to_numpy_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor -> (H, W, 3) float64 array, clipped to [0, 1]."""
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {tuple(t.shape)}")
    return t.detach().cpu().numpy().transpose(1, 2, 0).clip(0.0, 1.0)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB between two arrays/tensors."""
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    if isinstance(b, torch.Tensor):
        b = b.detach().cpu().numpy()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def finite_difference_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
) -> list[torch.Tensor]:
    """Central finite-difference gradients of a scalar function.

    ``fn`` maps the tensors in ``inputs`` to a scalar tensor.  Returns one
    gradient tensor per input, evaluated coordinate by coordinate.  Meant for
    small inputs in tests; cost is two function evaluations per coordinate.
    """
    grads = []
    base = [x.detach().clone() for x in inputs]
    for idx, x in enumerate(base):
        g = torch.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = float(fn(*base))
            flat[j] = orig - eps
            lo = float(fn(*base))
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def check_gradients(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    rtol: float = 1e-4,
    atol: float = 1e-7,
    eps: float = 1e-6,
) -> float:
    """Compare autograd gradients of ``fn`` against central differences.

    Returns the worst relative error over all coordinates of all inputs and
    raises AssertionError if any coordinate violates ``atol + rtol * scale``
    where scale is the larger gradient magnitude at that coordinate.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    if out.numel() != 1:
        raise ValueError("check_gradients expects a scalar-valued function")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    numeric = finite_difference_gradients(fn, inputs, eps=eps)
    worst = 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if a is None:
            a = torch.zeros_like(n)
        diff = (a - n).abs()
        scale = torch.maximum(a.abs(), n.abs())
        bound = atol + rtol * scale
        rel = diff / scale.clamp_min(1e-30)
        bad = diff > bound
        if bad.any():
            j = int((diff - bound).argmax())
            raise AssertionError(
                f"gradient mismatch on input {k} at flat index {j}: "
                f"analytic={a.reshape(-1)[j]:.12g} numeric={n.reshape(-1)[j]:.12g} "
                f"(|diff|={diff.reshape(-1)[j]:.3g}, bound={bound.reshape(-1)[j]:.3g})"
            )
        if diff.numel():
            worst = max(worst, float(rel.max()))
    return worst
