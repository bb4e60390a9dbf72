"""Trilinear volume resampling: exactness, linearity, shifts, round trips."""

import numpy as np
import pytest
import torch

from canonface.motion import KeypointSet, canonical_pair
from canonface.util import DTYPE, psnr
from canonface.warp import identity_field, warp_volume


def random_volume(rng, shape=(2, 4, 6, 5)) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=DTYPE)


# ---------------------------------------------------------------------------
# identity_field
# ---------------------------------------------------------------------------

def test_identity_field_degenerate_and_corners():
    f1 = identity_field((1, 1, 1))
    assert torch.equal(f1, torch.zeros(1, 1, 1, 3, dtype=DTYPE))
    f2 = identity_field((2, 2, 2))
    assert torch.allclose(f2[0, 0, 0], torch.tensor([-0.5, -0.5, -0.5], dtype=DTYPE))
    assert torch.allclose(f2[1, 1, 1], torch.tensor([0.5, 0.5, 0.5], dtype=DTYPE))
    # voxel centers: (2i+1)/N - 1, so the extreme entries are +-(1 - 1/N)
    f4 = identity_field((4, 4, 4))
    assert float(f4.min()) == -0.75 and float(f4.max()) == 0.75


def test_identity_field_rejects_bad_shape():
    with pytest.raises(ValueError):
        identity_field((0, 2, 2))


def test_identity_warp_is_bit_exact():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        shape = (
            int(rng.integers(1, 4)),
            int(rng.integers(1, 4)),
            int(rng.integers(2, 7)),
            int(rng.integers(2, 7)),
        )
        v = random_volume(rng, shape)
        out = warp_volume(v, identity_field(shape[1:]))
        assert torch.equal(out, v), f"seed {seed}: identity warp is not exact"


# ---------------------------------------------------------------------------
# warp_volume semantics
# ---------------------------------------------------------------------------

def test_warp_integer_shift_duplicates_border():
    rng = np.random.default_rng(3)
    v = random_volume(rng, (1, 1, 1, 5))
    d, h, w = 1, 1, 5
    field = identity_field((d, h, w)).clone()
    field[..., 0] += 2.0 / w  # shift sampling one voxel to the right
    out = warp_volume(v, field)
    expected = torch.cat([v[..., 1:], v[..., -1:]], dim=-1)  # border clamp
    assert torch.equal(out, expected)


def test_warp_constant_volume_any_field():
    rng = np.random.default_rng(4)
    v = torch.full((3, 2, 4, 4), 0.7312, dtype=DTYPE)
    field = identity_field((2, 4, 4)) + torch.as_tensor(
        rng.uniform(-0.5, 0.5, (2, 4, 4, 3)), dtype=DTYPE
    )
    out = warp_volume(v, field)
    assert torch.allclose(out, v, atol=1e-12)


def test_warp_linearity_in_volume():
    rng = np.random.default_rng(5)
    v1 = random_volume(rng)
    v2 = random_volume(rng)
    field = identity_field((4, 6, 5)) + torch.as_tensor(
        rng.uniform(-0.3, 0.3, (4, 6, 5, 3)), dtype=DTYPE
    )
    a, b = 1.7, -0.4
    lhs = warp_volume(a * v1 + b * v2, field)
    rhs = a * warp_volume(v1, field) + b * warp_volume(v2, field)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_warp_border_clamp_outside_cube():
    v = torch.arange(5, dtype=DTYPE).reshape(1, 1, 1, 5)
    field = identity_field((1, 1, 5)).clone()
    field[..., 0] = 2.0  # far outside: must clamp to the last voxel
    out = warp_volume(v, field)
    assert torch.equal(out, torch.full((1, 1, 1, 5), 4.0, dtype=DTYPE))


def test_warp_shape_validation():
    v = torch.zeros(2, 3, 4, 4, dtype=DTYPE)
    with pytest.raises(ValueError):
        warp_volume(v, identity_field((3, 4, 5)))
    with pytest.raises(ValueError):
        warp_volume(torch.zeros(3, 4, 4, dtype=DTYPE), identity_field((3, 4, 4)))


# ---------------------------------------------------------------------------
# round trips through keypoint-driven fields
# ---------------------------------------------------------------------------

def smooth_volume(shape, rng) -> torch.Tensor:
    """Band-limited positive volume: sums of low-frequency separable cosines."""
    c, d, h, w = shape
    zs = torch.linspace(-1.0, 1.0, d, dtype=DTYPE)
    ys = torch.linspace(-1.0, 1.0, h, dtype=DTYPE)
    xs = torch.linspace(-1.0, 1.0, w, dtype=DTYPE)
    gz, gy, gx = torch.meshgrid(zs, ys, xs, indexing="ij")
    vol = torch.zeros(shape, dtype=DTYPE)
    for ch in range(c):
        acc = torch.zeros(d, h, w, dtype=DTYPE)
        for _ in range(3):
            fx, fy, fz = rng.uniform(0.3, 1.2, 3)
            px, py, pz = rng.uniform(0, 2 * np.pi, 3)
            acc = acc + torch.cos(np.pi * fx * gx + px) * torch.cos(
                np.pi * fy * gy + py
            ) * torch.cos(np.pi * fz * gz + pz)
        vol[ch] = acc
    return 0.5 + vol / 12.0  # roughly [0.25, 0.75]


def interior_crop(v: torch.Tensor) -> torch.Tensor:
    _, d, h, w = v.shape
    return v[:, :, int(0.1 * h) : h - int(0.1 * h), int(0.1 * w) : w - int(0.1 * w)]


def test_round_trip_small_rigid_motions():
    """orig -> canonical -> orig reconstruction through keypoint fields."""
    shape = (2, 8, 16, 16)
    worst = 100.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        canon = KeypointSet(torch.as_tensor(rng.uniform(-0.5, 0.5, (6, 3)), dtype=DTYPE))
        t = torch.as_tensor(rng.uniform(-0.15, 0.15, 3), dtype=DTYPE)
        posed = KeypointSet(canon.points + t)
        to_c, from_c = canonical_pair(posed, canon, shape[1:])
        v = smooth_volume(shape, rng)
        back = warp_volume(warp_volume(v, to_c), from_c)
        score = psnr(interior_crop(back), interior_crop(v))
        worst = min(worst, score)
    assert worst >= 30.0, f"worst interior round-trip PSNR {worst:.2f} dB"
