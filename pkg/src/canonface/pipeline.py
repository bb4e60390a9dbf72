"""End-to-end assembly: swap/animate entry points, training, evaluation.

A swap encodes the target frame into an appearance volume, extracts its
motion, warps the volume into the canonical (motion-free) space, injects
the source identity through partial modulation, refines, warps back to the
target's pose, and decodes.  Training updates only the modulation stack,
the refiner, and the discriminator; the representation backbone stays
frozen.  Everything here is deterministic given the config seed.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import estimators, metrics, synthworld
from .backbone import Backbone, FramePool, build_frame_pool, pretrain_backbone
from .config import PipelineConfig
from .losses import (
    LossTerms,
    MotionReadback,
    PatchDiscriminator,
    PerceptualEmbedder,
    SwapOutputs,
    adversarial_pair,
    feature_distance,
    identity_loss,
    mask_loss,
    motion_loss,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from .motion import (
    animation_retarget,
    axis_angle_from_matrix,
    canonical_pair,
    compose_keypoints,
    estimate_deformation,
)
from .pim import PimStack
from .refine import VolumeRefiner
from .synthworld import Clip, make_clip, sample_identity, sample_latents, smooth_trajectory
from .util import DTYPE, as_image_tensor, to_numpy_image
from .warp import identity_field, warp_volume

FORMAT_VERSION = 1
LOG_HEADER = "step\tidentity\tperceptual\tmotion\treconstruction\tgenerator\tmask\tdiscriminator\ttotal"
LOG_FIELDS = ("identity", "perceptual", "motion", "reconstruction", "generator", "mask")


class PairSampler:
    """Random (source, target) frame pairs from a rendered pool.

    With the configured probability the two frames share an identity
    (reconstruction branch); otherwise the identities are guaranteed
    distinct.  Returns (source_index, target_index, same_identity).
    """

    def __init__(self, pool: FramePool, same_identity_prob: float, rng: np.random.Generator):
        if not (0.0 <= same_identity_prob <= 1.0):
            raise ValueError("same_identity_prob must lie in [0, 1]")
        self.pool = pool
        self.p_same = same_identity_prob
        self.rng = rng
        n_ids = int(pool.id_index.max()) + 1
        self.by_identity = [np.flatnonzero(pool.id_index == i) for i in range(n_ids)]
        if n_ids < 2 and same_identity_prob < 1.0:
            raise ValueError("cross-identity sampling needs at least two identities")

    def sample(self) -> tuple[int, int, bool]:
        n_ids = len(self.by_identity)
        same = bool(self.rng.random() < self.p_same)
        tid = int(self.rng.integers(0, n_ids))
        tgt = int(self.rng.choice(self.by_identity[tid]))
        if same:
            src = int(self.rng.choice(self.by_identity[tid]))
        else:
            sid = int(self.rng.integers(0, n_ids - 1))
            if sid >= tid:
                sid += 1
            src = int(self.rng.choice(self.by_identity[sid]))
        return src, tgt, same


class SwapPipeline:
    """The complete swapping model: frozen backbone plus trainable modules."""

    def __init__(self, config: PipelineConfig, backbone: Backbone):
        self.config = config
        self.backbone = backbone
        self.step = 0
        self.optimizer_states: dict = {}
        torch.manual_seed(1000 + config.seed)
        self.pim = PimStack(
            config.channels,
            config.depth,
            config.id_dim,
            n_blocks=config.pim_blocks,
            kernel=config.pim_kernel,
            mask_hidden=config.pim_mask_hidden,
        )
        self.refiner = VolumeRefiner(config.channels, width=config.refiner_width)
        self.discriminator = PatchDiscriminator(config.image_size, width=config.disc_width)
        self.perceptual = PerceptualEmbedder(backbone.encoder)

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def generator_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.pim.parameters()) + list(self.refiner.parameters())

    def readback(self, image: torch.Tensor) -> MotionReadback:
        """Pose (axis-angle) and expression of an image via the frozen extractor."""
        _, motion = self.backbone.extractor.extract_motion(image)
        return MotionReadback(
            pose=axis_angle_from_matrix(motion.rotation), expression=motion.expression
        )

    def _check_image(self, image: torch.Tensor, name: str) -> torch.Tensor:
        s = self.config.image_size
        if image.shape != (3, s, s):
            raise ValueError(f"{name} must be (3, {s}, {s}), got {tuple(image.shape)}")
        return image

    # ------------------------------------------------------------------
    # swapping
    # ------------------------------------------------------------------

    def swap_frame(
        self,
        source_img,
        target_frame,
        *,
        no_warp: bool | None = None,
        no_mask: bool | None = None,
        no_refine: bool | None = None,
        bypass_pim: bool = False,
    ) -> tuple[torch.Tensor, SwapOutputs]:
        """Swap the source identity onto one target frame.

        Keyword flags override the config's ablation flags for this call;
        ``bypass_pim`` skips identity injection entirely (used to probe the
        warp round trip in isolation).  Returns the swapped frame (3, S, S)
        and everything the losses need.
        """
        cfg = self.config
        nw = cfg.no_warp if no_warp is None else no_warp
        nm = cfg.no_mask if no_mask is None else no_mask
        nr = cfg.no_refine if no_refine is None else no_refine

        src = self._check_image(as_image_tensor(source_img), "source_img")
        tgt = self._check_image(as_image_tensor(target_frame), "target_frame")

        volume = self.backbone.encoder(tgt)
        canon_kp, target_motion = self.backbone.extractor.extract_motion(tgt)
        embedding = self.backbone.recognizer.embed(src)
        force_mask = "ones" if nm else None

        masks: list[torch.Tensor] = []
        if nw:
            x = volume
            if not bypass_pim:
                x, masks = self.pim.pim_apply(x, embedding, force_mask=force_mask, collect_masks=True)
            if not nr:
                x = self.refiner(x)
            swapped = self.backbone.decoder(x)
            swapped_canonical = None
            target_canonical = None
        else:
            posed = compose_keypoints(canon_kp, target_motion)
            to_canon, from_canon = canonical_pair(posed, canon_kp, volume.shape[1:], cfg.sigma)
            canon_volume = warp_volume(volume, to_canon)
            target_canonical = self.backbone.decoder(canon_volume)
            x = canon_volume
            if not bypass_pim:
                x, masks = self.pim.pim_apply(x, embedding, force_mask=force_mask, collect_masks=True)
            if not nr:
                x = self.refiner(x)
            swapped_canonical = self.backbone.decoder(x)
            swapped = self.backbone.decoder(warp_volume(x, from_canon))

        readback_original = self.readback(swapped)
        readback_canonical = None if swapped_canonical is None else self.readback(swapped_canonical)
        with torch.no_grad():
            target_rb = MotionReadback(
                pose=axis_angle_from_matrix(target_motion.rotation).detach(),
                expression=target_motion.expression.detach(),
            )
        outputs = SwapOutputs(
            swapped_original=swapped,
            swapped_canonical=swapped_canonical,
            target_canonical=target_canonical,
            masks=masks,
            readback_original=readback_original,
            readback_canonical=readback_canonical,
            target_motion=target_rb,
        )
        return swapped, outputs

    def swap_clip(self, source_img, target_clip: Clip, **overrides) -> Clip:
        """Per-frame swap of a clip; audio latents pass through unchanged."""
        with torch.no_grad():
            frames = [
                to_numpy_image(self.swap_frame(source_img, fr, **overrides)[0])
                for fr in target_clip.frames
            ]
        return Clip(
            frames=frames,
            latents_per_frame=None,
            audio_latents=target_clip.audio_latents.copy(),
        )

    def animate_clip(self, source_clip: Clip, target_img, shape_transfer: bool = False) -> Clip:
        """Animate a target face with the source clip's expression sequence.

        The target keeps its own identity, pose, and translation; each output
        frame substitutes the matching source frame's expression offsets.
        With ``shape_transfer`` the warp-back layout uses the source's
        canonical keypoints (face-shape exchange); off, the path is the
        default animation bit for bit.
        """
        cfg = self.config
        with torch.no_grad():
            tgt = self._check_image(as_image_tensor(target_img), "target_img")
            volume = self.backbone.encoder(tgt)
            canon_t, motion_t = self.backbone.extractor.extract_motion(tgt)
            posed_t = compose_keypoints(canon_t, motion_t)
            to_canon = estimate_deformation(posed_t, canon_t, volume.shape[1:], cfg.sigma)
            x = warp_volume(volume, to_canon)
            embedding = self.backbone.recognizer.embed(tgt)
            x = self.pim.pim_apply(x, embedding, force_mask="ones" if cfg.no_mask else None)
            if not cfg.no_refine:
                x = self.refiner(x)
            canon_used = canon_t
            if shape_transfer:
                canon_used, _ = self.backbone.extractor.extract_motion(
                    self._check_image(as_image_tensor(source_clip.frames[0]), "source frame")
                )
            frames = []
            for fr in source_clip.frames:
                src_img = self._check_image(as_image_tensor(fr), "source frame")
                _, src_motion = self.backbone.extractor.extract_motion(src_img)
                retargeted = animation_retarget(canon_used, motion_t, src_motion.expression)
                from_anim = estimate_deformation(canon_t, retargeted, volume.shape[1:], cfg.sigma)
                out = self.backbone.decoder(warp_volume(x, from_anim))
                frames.append(to_numpy_image(out))
        return Clip(frames=frames, latents_per_frame=None, audio_latents=source_clip.audio_latents.copy())

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def train(self, pool: FramePool | None = None, out_dir=None, progress=None) -> dict:
        """Alternating generator/discriminator training on sampled pairs.

        Emits one loss-log line per step (batch means, full precision) and,
        when ``out_dir`` is given, writes ``loss_log.tsv`` plus a final
        ``checkpoint.pt``.  Aborts with a diagnostic snapshot on non-finite
        loss.  Deterministic: two runs with one seed produce identical logs
        and checkpoints.
        """
        cfg = self.config
        if pool is None:
            pool_rng = np.random.default_rng(920_000 + 3 * cfg.seed)
            identities = [sample_identity(pool_rng, dim=cfg.id_dim) for _ in range(cfg.n_identities)]
            pool = build_frame_pool(identities, cfg.poses_per_identity, cfg.image_size, pool_rng)
        sampler = PairSampler(pool, cfg.same_identity_prob, np.random.default_rng(930_000 + 11 * cfg.seed))
        g_opt = torch.optim.AdamW(
            self.generator_parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            weight_decay=cfg.weight_decay,
        )
        d_opt = torch.optim.AdamW(
            self.discriminator.parameters(),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
            weight_decay=cfg.weight_decay,
        )
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        log_lines = [LOG_HEADER]
        zero = torch.zeros((), dtype=DTYPE)
        for step in range(cfg.total_steps):
            g_batch = zero.clone()
            d_batch = zero.clone()
            sums = {name: 0.0 for name in LOG_FIELDS}
            for _ in range(cfg.batch_size):
                si, ti, same = sampler.sample()
                src = pool.images[si]
                tgt = pool.images[ti]
                _, outputs = self.swap_frame(src, tgt)
                g_adv, d_adv = adversarial_pair(outputs, tgt, self.discriminator, cfg.r1_gamma)
                if outputs.masks and not cfg.no_mask:
                    m_loss = mask_loss(outputs.masks, pool.masks[ti])
                else:
                    m_loss = zero.clone()
                terms = LossTerms(
                    identity=identity_loss(src, outputs, self.backbone.recognizer),
                    perceptual=perceptual_loss(outputs, tgt, self.perceptual),
                    motion=motion_loss(outputs),
                    reconstruction=reconstruction_loss(outputs, tgt, same),
                    generator=g_adv,
                    mask=m_loss,
                )
                g_batch = g_batch + total_loss(terms, cfg.weights)
                d_batch = d_batch + d_adv
                for name in LOG_FIELDS:
                    sums[name] += float(getattr(terms, name).detach())
            g_batch = g_batch / cfg.batch_size
            d_batch = d_batch / cfg.batch_size
            if not (torch.isfinite(g_batch) and torch.isfinite(d_batch)):
                if out_dir is not None:
                    self.save_checkpoint(out_dir / "diagnostic.pt", step=step)
                raise RuntimeError(
                    f"non-finite loss at step {step} "
                    f"(generator {float(g_batch.detach())}, discriminator {float(d_batch.detach())})"
                )
            g_opt.zero_grad(set_to_none=True)
            g_batch.backward()
            g_opt.step()
            d_opt.zero_grad(set_to_none=True)
            d_batch.backward()
            d_opt.step()

            means = {name: sums[name] / cfg.batch_size for name in LOG_FIELDS}
            line = "\t".join(
                [str(step)]
                + [f"{means[name]:.17g}" for name in LOG_FIELDS]
                + [f"{float(d_batch.detach()):.17g}", f"{float(g_batch.detach()):.17g}"]
            )
            log_lines.append(line)
            if progress is not None and (step % 50 == 0 or step == cfg.total_steps - 1):
                progress(
                    f"step {step}: total {float(g_batch.detach()):.4f}, "
                    f"disc {float(d_batch.detach()):.4f}"
                )

        self.step = cfg.total_steps
        self.optimizer_states = {
            "generator": g_opt.state_dict(),
            "discriminator": d_opt.state_dict(),
        }
        result = {"log_lines": log_lines}
        if out_dir is not None:
            log_path = out_dir / "loss_log.tsv"
            log_path.write_text("\n".join(log_lines) + "\n")
            ckpt_path = out_dir / "checkpoint.pt"
            self.save_checkpoint(ckpt_path, step=self.step, optimizer_states=self.optimizer_states)
            result["log_path"] = str(log_path)
            result["checkpoint_path"] = str(ckpt_path)
        return result

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save_checkpoint(self, path, step: int | None = None, optimizer_states: dict | None = None) -> None:
        payload = {
            "format_version": FORMAT_VERSION,
            "step": int(self.step if step is None else step),
            "config": self.config.to_dict(),
            "modules": {
                "pim": self.pim.state_dict(),
                "refiner": self.refiner.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                **{
                    name: module.state_dict()
                    for name, module in self.backbone.named_modules_dict().items()
                },
            },
            "optimizers": optimizer_states if optimizer_states is not None else self.optimizer_states,
            "backbone_stats": dict(self.backbone.stats),
        }
        # The zip container embeds a fresh serialization id on every save;
        # the legacy stream format is byte-identical for identical state,
        # which checkpoint reproducibility is contracted to provide.
        torch.save(payload, path, _use_new_zipfile_serialization=False)

    @staticmethod
    def load_checkpoint(path) -> "SwapPipeline":
        payload = torch.load(path, weights_only=True)
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = PipelineConfig.from_dict(payload["config"])
        from .losses import IdentityRecognizer, LatentOracleEmbedder
        from .motion import MotionExtractor
        from .warp import AppearanceDecoder, AppearanceEncoder

        backbone = Backbone(
            encoder=AppearanceEncoder(config.image_size, config.channels, config.depth, config.enc_width),
            decoder=AppearanceDecoder(config.image_size, config.channels, config.depth, config.enc_width),
            extractor=MotionExtractor(config.image_size, config.n_keypoints, config.extractor_width, config.extractor_mlp),
            recognizer=IdentityRecognizer(config.image_size, config.id_dim, config.recognizer_width),
            oracle=LatentOracleEmbedder(dim=config.id_dim),
            stats=dict(payload.get("backbone_stats", {})),
        )
        modules = payload["modules"]
        for name, module in backbone.named_modules_dict().items():
            module.load_state_dict(modules[name])
        backbone.freeze()
        pipeline = SwapPipeline(config, backbone)
        pipeline.pim.load_state_dict(modules["pim"])
        pipeline.refiner.load_state_dict(modules["refiner"])
        pipeline.discriminator.load_state_dict(modules["discriminator"])
        pipeline.step = int(payload["step"])
        pipeline.optimizer_states = dict(payload.get("optimizers", {}))
        return pipeline

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def evaluate(self, benchmark, ablation_grid: bool = False, o_max: int = 15) -> dict:
        """Score swapped clips against every metric, with labeled estimators.

        ``benchmark`` is a list of (source_clip, target_clip) pairs whose
        clips carry scene latents.  The optional ablation grid re-runs the
        benchmark with each ablation bypass applied at inference time to the
        same checkpoint.
        """
        if len(benchmark) == 0:
            raise ValueError("benchmark must be nonempty")
        report = {
            "format_version": FORMAT_VERSION,
            "checkpoint_step": self.step,
            "n_pairs": len(benchmark),
            "ablation": {
                "no_warp": self.config.no_warp,
                "no_mask": self.config.no_mask,
                "no_refine": self.config.no_refine,
            },
            "config": self.config.to_dict(),
        }
        base = self._evaluate_rows(benchmark, {}, o_max)
        report["metrics"] = base["metrics"]
        report["per_pair"] = base["per_pair"]
        if ablation_grid:
            grid = {"full": base["metrics"]}
            for label, overrides in (
                ("no_warp", {"no_warp": True}),
                ("no_mask", {"no_mask": True}),
                ("no_refine", {"no_refine": True}),
            ):
                grid[label] = self._evaluate_rows(benchmark, overrides, o_max)["metrics"]
            report["ablation_grid"] = grid
            report["ablation_grid_note"] = (
                "grid rows apply inference-time bypasses to one checkpoint; "
                "trained-per-flag ablations are separate training runs"
            )
        return report

    def _evaluate_rows(self, benchmark, overrides: dict, o_max: int) -> dict:
        recognizer = self.backbone.recognizer
        per_pair = []
        pose_means, expr_means, ear_vals, gaze_vals = [], [], [], []
        tc_vals, idsim_vals, idret_vals = [], [], []
        lse_d_vals, lse_c_vals, lse_d_base_vals = [], [], []
        recon_out_vals, perc_out_vals = [], []
        target_clip_embs, swapped_clip_embs = [], []

        # gallery: one neutral render per distinct benchmark identity
        gallery_imgs, gallery_keys = [], []
        neutral = np.array([0.8, 0.0, 0.0, 0.0])
        eye3 = torch.eye(3, dtype=DTYPE)
        zero3 = torch.zeros(3, dtype=DTYPE)
        for source_clip, target_clip in benchmark:
            for lat_list in (source_clip.latents_per_frame, target_clip.latents_per_frame):
                if lat_list is None:
                    raise ValueError("benchmark clips must carry scene latents")
                code = lat_list[0].identity_code
                key = hashlib.sha256(code.tobytes()).hexdigest()
                if key not in gallery_keys:
                    gallery_keys.append(key)
                    lat = synthworld.make_scene_latents(code, eye3, zero3, neutral)
                    img, _ = synthworld.render_face(lat, self.config.image_size)
                    gallery_imgs.append(torch.from_numpy(img.transpose(2, 0, 1)).to(DTYPE))

        with torch.no_grad():
            for source_clip, target_clip in benchmark:
                src_frame = source_clip.frames[0]
                src_code = source_clip.latents_per_frame[0].identity_code
                tl = target_clip.latents_per_frame
                tgt_code = tl[0].identity_code
                swapped = self.swap_clip(src_frame, target_clip, **overrides)

                pose_err, expr_err = [], []
                eye_t, eye_s, gaze_t, gaze_s = [], [], [], []
                recon_out, perc_out = [], []
                sw_id_emb, sw_pose, sw_ear, sw_mouth = [], [], [], []
                tg_id_emb, tg_pose, tg_ear, tg_mouth = [], [], [], []
                for t, (tf, sf) in enumerate(zip(target_clip.frames, swapped.frames)):
                    sf_t = as_image_tensor(sf)
                    tf_t = as_image_tensor(tf)
                    rb = self.readback(sf_t)
                    aa_gt = axis_angle_from_matrix(tl[t].pose.rotation)
                    pose_err.append(float((rb.pose - aa_gt).norm()))
                    expr_err.append(float((rb.expression - tl[t].pose.expression).abs().mean()))

                    r_t = estimators.measure_eyes(tf, tgt_code, tl[t].pose)
                    r_s = estimators.measure_eyes(sf, src_code, tl[t].pose)
                    eye_t.append(r_t)
                    eye_s.append(r_s)
                    gaze_t.append(r_t.gaze)
                    gaze_s.append(r_s.gaze)

                    mask = torch.from_numpy(
                        synthworld.part_mask_stack(tl[t], self.config.image_size)[0]
                    ).to(DTYPE)
                    outside = 1.0 - mask
                    denom = float(outside.sum()) * 3.0
                    recon_out.append(float(((sf_t - tf_t).abs() * outside).sum()) / max(denom, 1.0))
                    perc_out.append(
                        float(feature_distance(sf_t * outside, tf_t * outside, self.perceptual))
                    )

                    # per-frame components of the clip embedding
                    sw_id_emb.append(recognizer.embed(sf_t).numpy())
                    tg_id_emb.append(recognizer.embed(tf_t).numpy())
                    sw_pose.append(rb.pose.numpy())
                    tg_pose.append(self.readback(tf_t).pose.numpy())
                    sw_ear.append(r_s.ear_value)
                    tg_ear.append(r_t.ear_value)
                    sw_mouth.append(estimators.measure_mouth(sf, src_code, tl[t].pose))
                    tg_mouth.append(estimators.measure_mouth(tf, tgt_code, tl[t].pose))

                pose_means.append(float(np.mean(pose_err)))
                expr_means.append(float(np.mean(expr_err)))
                ear_left = metrics.ear_metric(
                    [r.landmarks[0] for r in eye_t], [r.landmarks[0] for r in eye_s]
                )
                ear_right = metrics.ear_metric(
                    [r.landmarks[1] for r in eye_t], [r.landmarks[1] for r in eye_s]
                )
                ear_vals.append(0.5 * (ear_left + ear_right))
                gaze_vals.append(metrics.gaze_error(np.stack(gaze_t), np.stack(gaze_s)))
                recon_out_vals.append(float(np.mean(recon_out)))
                perc_out_vals.append(float(np.mean(perc_out)))
                idsim_vals.append(metrics.id_similarity(as_image_tensor(src_frame), [as_image_tensor(f) for f in swapped.frames], recognizer))
                idret_vals.append(
                    metrics.id_retrieval(
                        [as_image_tensor(src_frame)],
                        [as_image_tensor(f) for f in swapped.frames],
                        gallery_imgs,
                        recognizer,
                    )
                )
                if len(target_clip) >= 2:
                    tc_vals.append(metrics.temporal_consistency(target_clip.frames, swapped.frames))
                if len(target_clip) > 2 * o_max:
                    anchors_s = [(src_code, lat.pose) for lat in tl]
                    v_emb = estimators.video_sync_embedding(swapped.frames, anchors_s)
                    se = metrics.SyncEmbeddings(v_emb, target_clip.audio_latents, o_max=o_max)
                    d, c = metrics.sync_metrics(se)
                    lse_d_vals.append(d)
                    lse_c_vals.append(c)
                    anchors_t = [(tgt_code, lat.pose) for lat in tl]
                    v_emb_t = estimators.video_sync_embedding(target_clip.frames, anchors_t)
                    d0, _ = metrics.sync_metrics(
                        metrics.SyncEmbeddings(v_emb_t, target_clip.audio_latents, o_max=o_max)
                    )
                    lse_d_base_vals.append(d0)

                swapped_clip_embs.append(
                    np.concatenate(
                        [
                            np.mean(sw_id_emb, axis=0),
                            np.mean(sw_pose, axis=0),
                            [np.mean(sw_ear)],
                            [np.mean(sw_mouth)],
                        ]
                    )
                )
                target_clip_embs.append(
                    np.concatenate(
                        [
                            np.mean(tg_id_emb, axis=0),
                            np.mean(tg_pose, axis=0),
                            [np.mean(tg_ear)],
                            [np.mean(tg_mouth)],
                        ]
                    )
                )
                per_pair.append(
                    {
                        "pose_error": pose_means[-1],
                        "expression_error": expr_means[-1],
                        "ear_metric": ear_vals[-1],
                        "gaze_error": gaze_vals[-1],
                        "id_similarity": idsim_vals[-1],
                        "id_retrieval": idret_vals[-1],
                        "recon_outside_mask": recon_out_vals[-1],
                        "perceptual_outside_mask": perc_out_vals[-1],
                    }
                )

        rows = [
            ("pose_error", np.mean(pose_means), "extractor readback vs oracle pose"),
            ("expression_error", np.mean(expr_means), "extractor readback vs oracle expression"),
            ("ear_metric", np.mean(ear_vals), "pixel eye landmarks"),
            ("gaze_error", np.mean(gaze_vals), "pixel pupil offset"),
            ("temporal_consistency", np.mean(tc_vals) if tc_vals else None, "block-matching flow"),
            ("id_similarity", np.mean(idsim_vals), "identity recognizer"),
            ("id_retrieval", np.mean(idret_vals), "identity recognizer"),
            ("lse_d", np.mean(lse_d_vals) if lse_d_vals else None, "pixel mouth through audio affine"),
            ("lse_c", np.mean(lse_c_vals) if lse_c_vals else None, "pixel mouth through audio affine"),
            (
                "lse_d_target_baseline",
                np.mean(lse_d_base_vals) if lse_d_base_vals else None,
                "pixel mouth through audio affine",
            ),
            ("recon_outside_mask", np.mean(recon_out_vals), "oracle face mask"),
            ("perceptual_outside_mask", np.mean(perc_out_vals), "oracle face mask + frozen encoder"),
        ]
        if len(benchmark) >= 2:
            mu_t, cov_t = metrics.gaussian_moments(np.stack(target_clip_embs))
            mu_s, cov_s = metrics.gaussian_moments(np.stack(swapped_clip_embs))
            rows.append(
                ("frechet_video", metrics.frechet_distance(mu_t, cov_t, mu_s, cov_s), "desk clip embedding")
            )
        else:
            rows.append(("frechet_video", None, "desk clip embedding (needs >= 2 pairs)"))
        metric_rows = [
            {"name": name, "value": None if value is None else float(value), "estimator": est}
            for name, value, est in rows
        ]
        return {"metrics": metric_rows, "per_pair": per_pair}

    # ------------------------------------------------------------------
    # canonical-space visualization
    # ------------------------------------------------------------------

    def visualize_canonical(self, clips: list[Clip]) -> dict:
        """Average face/eyes/mouth masks in aligned-original vs canonical space.

        Every frame's part-mask stack is carried through (a) a pure
        translation-compensating field and (b) the full to-canonical field,
        both driven by the frozen extractor's motion estimate.  The score per
        space is the across-frame per-pixel variance, averaged over pixels
        and parts; canonical decoupling shows up as a much lower score.
        """
        if len(clips) == 0:
            raise ValueError("need at least one clip")
        cfg = self.config
        shape = (cfg.depth, cfg.volume_hw, cfg.volume_hw)
        base = identity_field(shape)
        aligned_stack, canon_stack = [], []
        with torch.no_grad():
            for clip in clips:
                if clip.latents_per_frame is None:
                    raise ValueError("visualization clips must carry scene latents")
                for frame, lat in zip(clip.frames, clip.latents_per_frame):
                    parts = torch.from_numpy(
                        synthworld.part_mask_stack(lat, cfg.image_size)
                    ).to(DTYPE)
                    small = F.adaptive_avg_pool2d(parts.unsqueeze(0), shape[1:])[0]
                    vol = small.unsqueeze(1).expand(3, cfg.depth, *shape[1:])
                    img = as_image_tensor(frame)
                    canon_kp, motion = self.backbone.extractor.extract_motion(img)
                    posed = compose_keypoints(canon_kp, motion)
                    to_canon = estimate_deformation(posed, canon_kp, shape, cfg.sigma)
                    aligned_field = base + motion.translation
                    canon_stack.append(warp_volume(vol, to_canon).mean(dim=1))
                    aligned_stack.append(warp_volume(vol, aligned_field).mean(dim=1))
        aligned = torch.stack(aligned_stack)  # (N, 3, h, w)
        canon = torch.stack(canon_stack)
        var_aligned = aligned.var(dim=0, unbiased=False).mean()
        var_canon = canon.var(dim=0, unbiased=False).mean()
        return {
            "aligned_mean": aligned.mean(dim=0).numpy(),
            "canonical_mean": canon.mean(dim=0).numpy(),
            "aligned_variance": float(var_aligned),
            "canonical_variance": float(var_canon),
            "n_frames": aligned.shape[0],
        }


# ----------------------------------------------------------------------
# top-level entry points
# ----------------------------------------------------------------------


def train_pipeline(config: PipelineConfig, out_dir=None, progress=None) -> tuple[SwapPipeline, dict]:
    """Pre-train the backbone, then run the swap training loop."""
    backbone = pretrain_backbone(config, progress)
    pipeline = SwapPipeline(config, backbone)
    result = pipeline.train(out_dir=out_dir, progress=progress)
    return pipeline, result


def make_benchmark(
    n_pairs: int,
    image_size: int = 64,
    seed: int = 0,
    n_frames: int = 40,
    id_dim: int = synthworld.ID_DIM,
) -> list[tuple[Clip, Clip]]:
    """Deterministic benchmark: (1-frame source clip, smooth target clip) pairs."""
    if n_pairs < 1:
        raise ValueError("need at least one pair")
    rng = np.random.default_rng(550_000 + seed)
    pairs = []
    for k in range(n_pairs):
        src_id = sample_identity(rng, dim=id_dim)
        tgt_id = sample_identity(rng, dim=id_dim)
        src_lat = sample_latents(rng, identity=src_id)
        source_clip = make_clip(
            src_id,
            [(src_lat.pose, src_lat.expression_scalars)],
            synced_audio=True,
            size=image_size,
            seed=seed * 1000 + k,
        )
        target_clip = make_clip(
            tgt_id,
            smooth_trajectory(rng, n_frames),
            synced_audio=True,
            size=image_size,
            seed=seed * 1000 + 500 + k,
        )
        pairs.append((source_clip, target_clip))
    return pairs


def save_benchmark(pairs, directory) -> None:
    directory = Path(directory)
    for k, (source_clip, target_clip) in enumerate(pairs):
        synthworld.save_clip(source_clip, directory / f"pair_{k:03d}" / "source")
        synthworld.save_clip(target_clip, directory / f"pair_{k:03d}" / "target")


def load_benchmark(directory) -> list[tuple[Clip, Clip]]:
    directory = Path(directory)
    pair_dirs = sorted(d for d in directory.iterdir() if d.is_dir() and d.name.startswith("pair_"))
    if not pair_dirs:
        raise ValueError(f"no pair_* directories under {directory}")
    return [
        (synthworld.load_clip(d / "source"), synthworld.load_clip(d / "target"))
        for d in pair_dirs
    ]
