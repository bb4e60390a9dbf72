"""Keypoint-based motion representation and dense deformation fields.

Conventions used throughout the package:

* Scene coordinates are normalized to [-1, 1]^3 with x to the right, y down
  and z toward the viewer.  Keypoints are row vectors, so a rotation acts as
  ``points @ R``.
* A posed keypoint set decomposes as ``X = X_canon @ R + E + T``: a person's
  canonical (identity-specific, pose-free) keypoints rotated into the current
  pose, plus a per-keypoint expression offset E and a global translation T.
* A deformation field is a (D, H, W, 3) grid whose entry at voxel (z, y, x)
  holds absolute normalized *sample* coordinates in (x, y, z) order, consumed
  by pull-sampling with border clamping (see ``warp.warp_volume``).  A field
  built from keypoint motion A -> B moves content sitting at an A keypoint
  onto the corresponding B keypoint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
from torch import nn

from .util import DTYPE
from .warp import identity_field

# Deformation fields are bare (D, H, W, 3) tensors; the out-of-range policy
# (border clamp) is fixed package-wide by the sampler.
DeformationField = torch.Tensor


@dataclass
class KeypointSet:
    """A set of n 3-D keypoints, shape (n, 3), in normalized scene coordinates.

    The pipeline configures n >= 3 non-degenerate keypoints; the type itself
    accepts any n >= 1 so that single-keypoint constructions remain usable in
    tests and analytic examples.
    """

    points: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.points, torch.Tensor):
            self.points = torch.as_tensor(self.points, dtype=DTYPE)
        if self.points.ndim != 2 or self.points.shape[-1] != 3:
            raise ValueError(f"keypoints must be (n, 3), got {tuple(self.points.shape)}")
        if self.points.shape[0] < 1:
            raise ValueError("need at least one keypoint")
        if not torch.isfinite(self.points).all():
            raise ValueError("keypoints must be finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class MotionParams:
    """Pose and expression: rotation (3,3), expression (n,3), translation (3,).

    ``rotation`` must be orthonormal with determinant +1 to 1e-6; regressed
    rotations should be passed through :func:`project_to_rotation` first.
    """

    rotation: torch.Tensor
    expression: torch.Tensor
    translation: torch.Tensor

    def __post_init__(self):
        if not isinstance(self.rotation, torch.Tensor):
            self.rotation = torch.as_tensor(self.rotation, dtype=DTYPE)
        if not isinstance(self.expression, torch.Tensor):
            self.expression = torch.as_tensor(self.expression, dtype=DTYPE)
        if not isinstance(self.translation, torch.Tensor):
            self.translation = torch.as_tensor(self.translation, dtype=DTYPE)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be (3, 3), got {tuple(self.rotation.shape)}")
        if self.expression.ndim != 2 or self.expression.shape[-1] != 3:
            raise ValueError(f"expression must be (n, 3), got {tuple(self.expression.shape)}")
        if self.translation.shape != (3,):
            raise ValueError(f"translation must be (3,), got {tuple(self.translation.shape)}")
        R = self.rotation.detach()
        err = (R @ R.T - torch.eye(3, dtype=R.dtype)).abs().max()
        if float(err) > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max error {float(err):.3g})")
        if abs(float(torch.linalg.det(R)) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")

    def with_rotation(self, rotation: torch.Tensor) -> "MotionParams":
        return replace(self, rotation=rotation)


def euler_to_matrix(roll, pitch, yaw) -> torch.Tensor:
    """Rotation matrix for x (roll), y (pitch), z (yaw) angles, Rz @ Ry @ Rx.

    Accepts floats or 0-dim tensors; differentiable w.r.t. tensor inputs.
    """
    roll = torch.as_tensor(roll, dtype=DTYPE)
    pitch = torch.as_tensor(pitch, dtype=DTYPE)
    yaw = torch.as_tensor(yaw, dtype=DTYPE)
    cr, sr = torch.cos(roll), torch.sin(roll)
    cp, sp = torch.cos(pitch), torch.sin(pitch)
    cy, sy = torch.cos(yaw), torch.sin(yaw)
    one = torch.ones((), dtype=DTYPE)
    zero = torch.zeros((), dtype=DTYPE)
    Rx = torch.stack([one, zero, zero, zero, cr, -sr, zero, sr, cr]).reshape(3, 3)
    Ry = torch.stack([cp, zero, sp, zero, one, zero, -sp, zero, cp]).reshape(3, 3)
    Rz = torch.stack([cy, -sy, zero, sy, cy, zero, zero, zero, one]).reshape(3, 3)
    return Rz @ Ry @ Rx


def project_to_rotation(m: torch.Tensor, iters: int = 16) -> torch.Tensor:
    """Nearest rotation matrix (polar factor) of an invertible 3x3 matrix.

    Uses the Newton iteration Y <- (Y + Y^-T) / 2, which converges
    quadratically to the orthogonal polar factor and — unlike an SVD-based
    projection — has stable gradients when singular values coincide, which is
    the common case here (inputs are small perturbations of rotations, all
    singular values near 1).  Requires det(m) > 0 so the limit is a proper
    rotation.
    """
    if m.shape != (3, 3):
        raise ValueError(f"expected (3, 3), got {tuple(m.shape)}")
    if float(torch.linalg.det(m.detach())) <= 0.0:
        raise ValueError("matrix must have positive determinant")
    y = m
    for _ in range(iters):
        y = 0.5 * (y + torch.linalg.inv(y).transpose(-1, -2))
    return y


def axis_angle_from_matrix(r: torch.Tensor) -> torch.Tensor:
    """Axis-angle vector (axis * angle) of a rotation matrix.

    Uses the antisymmetric part for the axis and atan2 for the angle, with a
    series-expanded scale near zero angle so the map stays smooth (and
    autograd-safe) at the identity.
    """
    if r.shape != (3, 3):
        raise ValueError(f"expected (3, 3), got {tuple(r.shape)}")
    w = torch.stack([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    s = 0.5 * torch.linalg.norm(w)  # sin(angle)
    c = 0.5 * (r.diagonal().sum() - 1.0)  # cos(angle)
    angle = torch.atan2(s, c)
    # w = 2 sin(angle) * axis, so the scale back to axis*angle is
    # angle / (2 sin angle); series-expand below 1e-4 radians.
    small = angle < 1e-4
    safe_s = torch.where(small, torch.ones_like(s), s)
    scale = torch.where(small, 0.5 + angle * angle / 12.0, angle / (2.0 * safe_s))
    return w * scale


def compose_keypoints(canonical: KeypointSet, motion: MotionParams) -> KeypointSet:
    """Pose canonical keypoints: ``X = X_canon @ R + E + T``."""
    if motion.expression.shape[0] != canonical.n:
        raise ValueError(
            f"expression rows ({motion.expression.shape[0]}) must match keypoint count ({canonical.n})"
        )
    pts = canonical.points @ motion.rotation + motion.expression + motion.translation
    return KeypointSet(pts)


def estimate_deformation(
    src: KeypointSet,
    dst: KeypointSet,
    shape: tuple[int, int, int],
    sigma: float = 0.15,
) -> DeformationField:
    """Dense field that moves content at ``src`` keypoints onto ``dst`` keypoints.

    Returns a (D, H, W, 3) pull-sampling grid: the identity grid plus a
    normalized-Gaussian blend of the per-keypoint displacements
    ``src_k - dst_k``, with weights centered on the destination keypoints.
    Sampling a volume through this grid reads, at each dst keypoint location,
    the content that sat at the matching src keypoint.

    Normalizing the weights to sum to one makes the field translation
    -equivariant: adding a constant u to every displacement shifts the whole
    field by exactly u.  At a destination keypoint far from all others the
    blend passes that keypoint's own displacement through exactly.
    """
    if src.n != dst.n:
        raise ValueError(f"keypoint count mismatch: {src.n} vs {dst.n}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    grid = identity_field(shape)  # (D, H, W, 3), (x, y, z) order
    disp = src.points - dst.points  # (n, 3)
    diff = grid.unsqueeze(-2) - dst.points  # (D, H, W, n, 3)
    logits = -(diff * diff).sum(-1) / (2.0 * sigma * sigma)
    weights = torch.softmax(logits, dim=-1)  # (D, H, W, n), sums to 1
    return grid + weights @ disp


def canonical_pair(
    posed: KeypointSet,
    canonical: KeypointSet,
    shape: tuple[int, int, int],
    sigma: float = 0.15,
) -> tuple[DeformationField, DeformationField]:
    """Fields (to_canonical, from_canonical) between a posed set and its canonical set.

    ``to_canonical`` re-arranges posed content into the canonical layout;
    ``from_canonical`` is built by swapping the keypoint roles.  For a pure
    translation ``posed = canonical + t`` the fields are the identity grid
    offset by +t and -t respectively.
    """
    return (
        estimate_deformation(posed, canonical, shape, sigma=sigma),
        estimate_deformation(canonical, posed, shape, sigma=sigma),
    )


def animation_retarget(
    canonical: KeypointSet,
    target_motion: MotionParams,
    source_expression: torch.Tensor,
) -> KeypointSet:
    """Keypoints that animate a face with its own pose but another's expression.

    Keeps the canonical keypoints, the rotation and the translation of the
    target, and substitutes the source's expression offsets:
    ``X = X_canon @ R_tgt + E_src + T_tgt``.
    """
    source_expression = torch.as_tensor(source_expression, dtype=DTYPE) if not isinstance(source_expression, torch.Tensor) else source_expression
    if source_expression.shape != (canonical.n, 3):
        raise ValueError(
            f"source expression must be ({canonical.n}, 3), got {tuple(source_expression.shape)}"
        )
    motion = MotionParams(
        rotation=target_motion.rotation,
        expression=source_expression,
        translation=target_motion.translation,
    )
    return compose_keypoints(canonical, motion)


def swap_canonical(
    a_canonical: KeypointSet,
    b_canonical: KeypointSet,
) -> tuple[KeypointSet, KeypointSet]:
    """Exchange two identities' canonical keypoints (face-shape transfer)."""
    return KeypointSet(b_canonical.points.clone()), KeypointSet(a_canonical.points.clone())


class MotionExtractor(nn.Module):
    """Convolutional regressor from an image to keypoints and motion parameters.

    Trained with direct supervision on synthetic-world ground truth and then
    frozen; the swap pipeline reads motion through it both to drive warping
    and to score pose/expression preservation of generated frames.  All
    activations are smooth (SiLU) so finite-difference gradient checks hold
    away from the (measure-zero) kinks of the architecture.
    """

    def __init__(self, image_size: int = 64, n_keypoints: int = 10, width: int = 32, mlp_dim: int = 256):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image_size must be divisible by 8")
        self.image_size = image_size
        self.n_keypoints = n_keypoints
        w1, w2, w3 = width, width * 2, width * 3
        self.features = nn.Sequential(
            nn.Conv2d(3, w1, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1), nn.SiLU(),
        )
        feat = w3 * (image_size // 8) ** 2
        self.trunk = nn.Sequential(nn.Linear(feat, mlp_dim), nn.SiLU())
        n3 = n_keypoints * 3
        self.head_canonical = nn.Linear(mlp_dim, n3)
        self.head_rotation = nn.Linear(mlp_dim, 9)
        self.head_expression = nn.Linear(mlp_dim, n3)
        self.head_translation = nn.Linear(mlp_dim, 3)
        # zero-init heads: the untrained extractor then reports the neutral
        # motion (identity rotation, zero expression/translation) exactly.
        for head in (self.head_canonical, self.head_rotation, self.head_expression, self.head_translation):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.double()

    def forward(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        """Batched raw heads: images (B,3,S,S) -> dict of unprojected outputs."""
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ValueError(
                f"expected (B, 3, {self.image_size}, {self.image_size}), got {tuple(images.shape)}"
            )
        b = images.shape[0]
        h = self.trunk(self.features(images).reshape(b, -1))
        eye = torch.eye(3, dtype=images.dtype)
        return {
            "canonical": self.head_canonical(h).reshape(b, self.n_keypoints, 3),
            "rotation_raw": self.head_rotation(h).reshape(b, 3, 3) + eye,
            "expression": self.head_expression(h).reshape(b, self.n_keypoints, 3),
            "translation": self.head_translation(h),
        }

    def extract_motion(self, image: torch.Tensor) -> tuple[KeypointSet, MotionParams]:
        """Single image (3,S,S) -> (canonical keypoints, motion with exact rotation)."""
        if image.ndim != 3:
            raise ValueError(f"expected a single (3, S, S) image, got {tuple(image.shape)}")
        out = self.forward(image.to(DTYPE).unsqueeze(0))
        rot = project_to_rotation(out["rotation_raw"][0])
        return (
            KeypointSet(out["canonical"][0]),
            MotionParams(rotation=rot, expression=out["expression"][0], translation=out["translation"][0]),
        )
