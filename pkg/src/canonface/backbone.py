"""Frozen backbone: appearance autoencoder, motion extractor, recognizer.

The swap pipeline trains only the identity-modulation and refinement
modules; everything that defines the representation (appearance volume,
motion readout, identity embedding) is pre-trained here with direct
supervision from the synthetic world and then frozen.  Pre-training is
fully deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import synthworld
from .config import PipelineConfig
from .losses import IdentityRecognizer, LatentOracleEmbedder
from .motion import MotionExtractor, axis_angle_from_matrix, compose_keypoints, project_to_rotation
from .synthworld import canonical_keypoints, render_face, sample_identity, sample_latents
from .util import DTYPE, psnr
from .warp import AppearanceDecoder, AppearanceEncoder


@dataclass
class FramePool:
    """Pre-rendered training frames with ground truth, as stacked tensors."""

    images: torch.Tensor  # (N, 3, S, S)
    masks: torch.Tensor  # (N, S, S) binary
    canonical: torch.Tensor  # (N, K, 3)
    rotation: torch.Tensor  # (N, 3, 3)
    expression: torch.Tensor  # (N, K, 3)
    translation: torch.Tensor  # (N, 3)
    id_codes: np.ndarray  # (N, id_dim) raw identity codes
    id_index: np.ndarray  # (N,) identity index into the pool's identity list
    identities: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def build_frame_pool(
    identities: list[np.ndarray],
    poses_per_identity: int,
    image_size: int,
    rng: np.random.Generator,
) -> FramePool:
    """Render ``poses_per_identity`` random frames for each identity."""
    images, masks, canon, rot, expr, trans, codes, idx = [], [], [], [], [], [], [], []
    for i, ident in enumerate(identities):
        for _ in range(poses_per_identity):
            lat = sample_latents(rng, identity=ident)
            img, gt = render_face(lat, image_size)
            images.append(torch.from_numpy(img.transpose(2, 0, 1)))
            masks.append(torch.from_numpy(gt.face_mask))
            canon.append(canonical_keypoints(ident).points)
            rot.append(lat.pose.rotation)
            expr.append(lat.pose.expression)
            trans.append(lat.pose.translation)
            codes.append(ident)
            idx.append(i)
    return FramePool(
        images=torch.stack(images).to(DTYPE),
        masks=torch.stack(masks).to(DTYPE),
        canonical=torch.stack(canon).to(DTYPE),
        rotation=torch.stack(rot).to(DTYPE),
        expression=torch.stack(expr).to(DTYPE),
        translation=torch.stack(trans).to(DTYPE),
        id_codes=np.stack(codes),
        id_index=np.asarray(idx),
        identities=list(identities),
    )


@dataclass
class Backbone:
    """Frozen pre-trained modules shared by training and evaluation."""

    encoder: AppearanceEncoder
    decoder: AppearanceDecoder
    extractor: MotionExtractor
    recognizer: IdentityRecognizer
    oracle: LatentOracleEmbedder
    stats: dict

    def named_modules_dict(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "extractor": self.extractor,
            "recognizer": self.recognizer,
        }

    def freeze(self) -> "Backbone":
        for m in self.named_modules_dict().values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
        return self


def _adamw(params, lr: float, steps: int):
    """AdamW plus a cosine decay to 5% of the base rate over ``steps``."""
    opt = torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=1e-5)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=0.05 * lr)
    return opt, sched


def render_supervised_batch(
    rng: np.random.Generator, n: int, image_size: int, id_dim: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, np.ndarray]:
    """``n`` fresh single-frame scenes with full ground truth.

    Every call draws new identities and poses, so training loops that
    consume this stream can never memorize a fixed pool: their training
    loss measures exactly what a held-out evaluation would.  Returns
    (images, canonical keypoints, rotations, expressions, translations,
    identity codes).
    """
    imgs, canon, rot, expr, trans, codes = [], [], [], [], [], []
    for _ in range(n):
        ident = sample_identity(rng, dim=id_dim)
        lat = sample_latents(rng, identity=ident)
        img, _ = render_face(lat, image_size)
        imgs.append(torch.from_numpy(img.transpose(2, 0, 1)))
        canon.append(canonical_keypoints(ident).points)
        rot.append(lat.pose.rotation)
        expr.append(lat.pose.expression)
        trans.append(lat.pose.translation)
        codes.append(ident)
    return (
        torch.stack(imgs).to(DTYPE),
        torch.stack(canon).to(DTYPE),
        torch.stack(rot).to(DTYPE),
        torch.stack(expr).to(DTYPE),
        torch.stack(trans).to(DTYPE),
        np.stack(codes),
    )


def pretrain_backbone(config: PipelineConfig, progress=None) -> Backbone:
    """Supervised pre-training of all frozen modules.

    Each stage streams freshly rendered scenes (new identity and pose every
    batch) instead of cycling a fixed pool, which is what lets the frozen
    modules generalize to the unseen identities used by evaluation and by
    swap training itself.  Targets (checked post-hoc and recorded in
    ``stats``): autoencoder reconstruction PSNR >= 28 dB on held-out
    renders, extractor mean keypoint error <= 0.05 scene units, per-clip
    rotation-angle correlation r >= 0.9, positive recognizer margin
    between own-identity and best other-identity cosine.
    """

    def log(msg: str) -> None:
        if progress is not None:
            progress(msg)

    s = config.image_size

    # --- appearance autoencoder ---------------------------------------
    rng = np.random.default_rng(910_000 + 7 * config.seed)
    torch.manual_seed(101 + config.seed)
    encoder = AppearanceEncoder(s, config.channels, config.depth, config.enc_width)
    decoder = AppearanceDecoder(s, config.channels, config.depth, config.enc_width)
    opt, sched = _adamw(
        list(encoder.parameters()) + list(decoder.parameters()),
        config.backbone_lr,
        config.backbone_autoencoder_steps,
    )
    for step in range(config.backbone_autoencoder_steps):
        batch = render_supervised_batch(rng, config.backbone_batch, s, config.id_dim)[0]
        recon = decoder(encoder(batch))
        loss = ((recon - batch) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0:
            log(f"autoencoder step {step}: mse {loss.item():.3e}")

    # --- motion extractor ----------------------------------------------
    # Besides per-factor supervision, the composed keypoints (canonical
    # rotated plus expression plus translation, from the *predicted*
    # factors) are matched against the ground-truth composition — that is
    # the quantity the pipeline actually warps with.
    rng = np.random.default_rng(912_000 + 7 * config.seed)
    torch.manual_seed(202 + config.seed)
    extractor = MotionExtractor(s, config.n_keypoints, config.extractor_width, config.extractor_mlp)
    opt, sched = _adamw(extractor.parameters(), config.backbone_lr, config.backbone_extractor_steps)
    for step in range(config.backbone_extractor_steps):
        imgs, canon, rot, expr, trans, _ = render_supervised_batch(
            rng, config.backbone_batch, s, config.id_dim
        )
        out = extractor(imgs)
        composed_gt = torch.bmm(canon, rot) + expr + trans.unsqueeze(1)
        composed = (
            torch.bmm(out["canonical"], out["rotation_raw"])
            + out["expression"]
            + out["translation"].unsqueeze(1)
        )
        loss = (
            ((out["canonical"] - canon) ** 2).mean()
            + ((out["rotation_raw"] - rot) ** 2).mean()
            + ((out["expression"] - expr) ** 2).mean()
            + ((out["translation"] - trans) ** 2).mean()
            + ((composed - composed_gt) ** 2).mean()
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0:
            log(f"extractor step {step}: loss {loss.item():.3e}")

    # --- identity recognizer --------------------------------------------
    # Pixel noise keeps the embedding stable on decoded (slightly soft)
    # frames, which is where swap training reads it.
    oracle = LatentOracleEmbedder(dim=config.id_dim)
    torch.manual_seed(303 + config.seed)
    recognizer = IdentityRecognizer(s, config.id_dim, config.recognizer_width)
    opt, sched = _adamw(recognizer.parameters(), config.backbone_lr, config.backbone_recognizer_steps)
    rng = np.random.default_rng(913_000 + 7 * config.seed)
    noise_gen = torch.Generator().manual_seed(404 + config.seed)
    for step in range(config.backbone_recognizer_steps):
        imgs, _, _, _, _, codes = render_supervised_batch(
            rng, config.backbone_batch, s, config.id_dim
        )
        targets = torch.stack([oracle.embed_code(c) for c in codes])
        imgs = imgs + 0.02 * torch.randn(imgs.shape, generator=noise_gen, dtype=DTYPE)
        out = recognizer(imgs.clamp(0.0, 1.0))
        loss = ((out - targets) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0:
            log(f"recognizer step {step}: mse {loss.item():.3e}")

    backbone = Backbone(
        encoder=encoder,
        decoder=decoder,
        extractor=extractor,
        recognizer=recognizer,
        oracle=oracle,
        stats={},
    ).freeze()
    backbone.stats = evaluate_backbone(backbone, config)
    log(
        "backbone stats: psnr {ae_psnr:.2f} dB, kp err {kp_error:.4f}, "
        "rotation r {rotation_corr:.3f}, id own-cos {recognizer_cos:.3f}".format(**backbone.stats)
    )
    return backbone


@torch.no_grad()
def evaluate_backbone(backbone: Backbone, config: PipelineConfig) -> dict:
    """Held-out sanity metrics for the frozen modules (fresh identities)."""
    s = config.image_size
    rng = np.random.default_rng(777_000 + 13 * config.seed)
    idents = [sample_identity(rng, dim=config.id_dim) for _ in range(12)]
    frames = []
    kp_gt = []
    for ident in idents:
        for _ in range(2):
            lat = sample_latents(rng, identity=ident)
            img, gt = render_face(lat, s)
            frames.append(torch.from_numpy(img.transpose(2, 0, 1)).to(DTYPE))
            kp_gt.append(gt.keypoints.points)
    batch = torch.stack(frames)

    recon = backbone.decoder(backbone.encoder(batch))
    ae_psnr = float(np.mean([psnr(r, b) for r, b in zip(recon, batch)]))

    kp_err = []
    for img, gt_pts in zip(batch, kp_gt):
        canon, motion = backbone.extractor.extract_motion(img)
        pred = compose_keypoints(canon, motion).points
        kp_err.append((pred - gt_pts).norm(dim=-1).mean().item())
    kp_error = float(np.mean(kp_err))

    # rotation-angle correlation along a smooth clip
    clip_rng = np.random.default_rng(778_000 + 13 * config.seed)
    ident = sample_identity(clip_rng, dim=config.id_dim)
    traj = synthworld.smooth_trajectory(clip_rng, 40)
    clip = synthworld.make_clip(ident, traj, synced_audio=True, size=s, seed=3)
    gt_angle, pred_angle = [], []
    for frame, lat in zip(clip.frames, clip.latents_per_frame):
        img = torch.from_numpy(frame.transpose(2, 0, 1)).to(DTYPE)
        _, motion = backbone.extractor.extract_motion(img)
        pred_angle.append(axis_angle_from_matrix(motion.rotation).norm().item())
        gt_angle.append(axis_angle_from_matrix(lat.pose.rotation).norm().item())
    rotation_corr = float(np.corrcoef(gt_angle, pred_angle)[0, 1])

    # recognizer: cosine to own oracle code, margin over other identities
    own, margins = [], []
    codes = torch.stack([backbone.oracle.embed_code(c) for c in idents])
    for i, ident in enumerate(idents):
        lat = sample_latents(rng, identity=ident)
        img, _ = render_face(lat, s)
        emb = backbone.recognizer.embed(torch.from_numpy(img.transpose(2, 0, 1)).to(DTYPE))
        cos = codes @ emb
        own.append(cos[i].item())
        others = torch.cat([cos[:i], cos[i + 1 :]])
        margins.append((cos[i] - others.max()).item())

    return {
        "ae_psnr": ae_psnr,
        "kp_error": kp_error,
        "rotation_corr": rotation_corr,
        "recognizer_cos": float(np.mean(own)),
        "recognizer_margin": float(np.mean(margins)),
    }
