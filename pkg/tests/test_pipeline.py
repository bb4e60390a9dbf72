"""End-to-end pipeline behavior at micro scale.

The backbone here is untrained (random encoder/decoder, zero-initialized
extractor heads), which pins down useful exactness baselines: the motion
readback is exactly neutral, so every deformation field is the identity and
the swap path reduces to pure encode/modulate/decode compositions that can
be compared bit-for-bit.
"""

import hashlib

import numpy as np
import pytest
import torch

from canonface.backbone import build_frame_pool
from canonface.config import PipelineConfig
from canonface.pipeline import (
    LOG_HEADER,
    PairSampler,
    SwapPipeline,
    load_benchmark,
    make_benchmark,
    save_benchmark,
)
from canonface.synthworld import Clip, make_clip, sample_identity, sample_latents
from canonface.util import to_numpy_image

from conftest import make_micro_config, make_untrained_backbone


def _tiny_pool(n_identities=3, poses=2, size=64, seed=5):
    rng = np.random.default_rng(seed)
    identities = [sample_identity(rng, dim=16) for _ in range(n_identities)]
    return build_frame_pool(identities, poses, size, rng)


def _render_pair(seed=11, size=64):
    """One source image and a one-frame target clip from distinct identities."""
    rng = np.random.default_rng(seed)
    src_id = sample_identity(rng, dim=16)
    tgt_id = sample_identity(rng, dim=16)
    src_lat = sample_latents(rng, identity=src_id)
    tgt_lat = sample_latents(rng, identity=tgt_id)
    src_clip = make_clip(src_id, [(src_lat.pose, src_lat.expression_scalars)], synced_audio=True, size=size, seed=seed)
    tgt_clip = make_clip(tgt_id, [(tgt_lat.pose, tgt_lat.expression_scalars)], synced_audio=True, size=size, seed=seed + 1)
    return src_clip, tgt_clip


# ----------------------------------------------------------------------
# pair sampler
# ----------------------------------------------------------------------


class TestPairSampler:
    def test_deterministic_sequence(self):
        pool = _tiny_pool()
        a = PairSampler(pool, 0.3, np.random.default_rng(42))
        b = PairSampler(pool, 0.3, np.random.default_rng(42))
        seq_a = [a.sample() for _ in range(50)]
        seq_b = [b.sample() for _ in range(50)]
        assert seq_a == seq_b

    def test_same_flag_matches_identity_indices(self):
        pool = _tiny_pool()
        sampler = PairSampler(pool, 0.5, np.random.default_rng(7))
        for _ in range(200):
            src, tgt, same = sampler.sample()
            assert (pool.id_index[src] == pool.id_index[tgt]) == same

    def test_same_identity_rate(self):
        pool = _tiny_pool()
        sampler = PairSampler(pool, 0.3, np.random.default_rng(123))
        hits = sum(sampler.sample()[2] for _ in range(20_000))
        assert 0.28 < hits / 20_000 < 0.32

    def test_probability_validation(self):
        pool = _tiny_pool()
        with pytest.raises(ValueError):
            PairSampler(pool, -0.1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            PairSampler(pool, 1.5, np.random.default_rng(0))

    def test_single_identity_needs_full_same_prob(self):
        pool = _tiny_pool(n_identities=1)
        with pytest.raises(ValueError):
            PairSampler(pool, 0.3, np.random.default_rng(0))
        sampler = PairSampler(pool, 1.0, np.random.default_rng(0))
        src, tgt, same = sampler.sample()
        assert same


# ----------------------------------------------------------------------
# swapping
# ----------------------------------------------------------------------


class TestSwapFrame:
    def test_output_shape_and_determinism(self, micro_pipeline, micro_config):
        src_clip, tgt_clip = _render_pair()
        s = micro_config.image_size
        out1, parts = micro_pipeline.swap_frame(src_clip.frames[0], tgt_clip.frames[0])
        out2, _ = micro_pipeline.swap_frame(src_clip.frames[0], tgt_clip.frames[0])
        assert out1.shape == (3, s, s)
        assert torch.equal(out1, out2)
        assert parts.swapped_canonical is not None
        assert parts.target_canonical is not None
        assert len(parts.masks) == micro_config.pim_blocks

    def test_wrong_resolution_rejected(self, micro_pipeline):
        bad = np.zeros((32, 32, 3))
        good = np.zeros((64, 64, 3))
        with pytest.raises(ValueError):
            micro_pipeline.swap_frame(bad, good)
        with pytest.raises(ValueError):
            micro_pipeline.swap_frame(good, bad)

    def test_no_warp_skips_canonical_decodes(self, micro_pipeline):
        src_clip, tgt_clip = _render_pair()
        _, parts = micro_pipeline.swap_frame(src_clip.frames[0], tgt_clip.frames[0], no_warp=True)
        assert parts.swapped_canonical is None
        assert parts.target_canonical is None
        assert parts.readback_canonical is None

    def test_no_mask_forces_unit_masks(self, micro_pipeline):
        src_clip, tgt_clip = _render_pair()
        _, parts = micro_pipeline.swap_frame(src_clip.frames[0], tgt_clip.frames[0], no_mask=True)
        assert parts.masks
        for mask in parts.masks:
            assert torch.equal(mask, torch.ones_like(mask))

    def test_bypass_pim_removes_identity_dependence(self, micro_pipeline):
        """With identity injection bypassed the source image is irrelevant."""
        src_a, tgt = _render_pair(seed=21)
        src_b, _ = _render_pair(seed=22)
        out_a, parts = micro_pipeline.swap_frame(src_a.frames[0], tgt.frames[0], bypass_pim=True)
        out_b, _ = micro_pipeline.swap_frame(src_b.frames[0], tgt.frames[0], bypass_pim=True)
        assert torch.equal(out_a, out_b)
        assert parts.masks == []

    def test_untrained_bypass_reduces_to_autoencoder(self, micro_pipeline, micro_backbone):
        """Zero-initialized extractor heads read neutral motion, so both
        deformation fields are exact identities and the bypassed swap equals
        decode(encode(target)) bit for bit."""
        _, tgt_clip = _render_pair(seed=31)
        out, parts = micro_pipeline.swap_frame(
            tgt_clip.frames[0], tgt_clip.frames[0], bypass_pim=True, no_refine=True
        )
        tgt = torch.from_numpy(tgt_clip.frames[0].transpose(2, 0, 1)).double()
        roundtrip = micro_backbone.decoder(micro_backbone.encoder(tgt))
        assert torch.equal(out, roundtrip)
        assert torch.equal(parts.target_canonical, roundtrip)


class TestSwapClip:
    def test_single_frame_matches_swap_frame(self, micro_pipeline):
        src_clip, tgt_clip = _render_pair(seed=41)
        clip_out = micro_pipeline.swap_clip(src_clip.frames[0], tgt_clip)
        frame_out, _ = micro_pipeline.swap_frame(src_clip.frames[0], tgt_clip.frames[0])
        assert len(clip_out) == 1
        assert np.array_equal(clip_out.frames[0], to_numpy_image(frame_out))

    def test_audio_passthrough_and_no_latents(self, micro_pipeline):
        src_clip, tgt_clip = _render_pair(seed=42)
        out = micro_pipeline.swap_clip(src_clip.frames[0], tgt_clip)
        assert out.latents_per_frame is None
        assert np.array_equal(out.audio_latents, tgt_clip.audio_latents)
        assert out.audio_latents is not tgt_clip.audio_latents

    def test_override_plumbing(self, micro_pipeline, micro_backbone):
        src_clip, tgt_clip = _render_pair(seed=43)
        out = micro_pipeline.swap_clip(src_clip.frames[0], tgt_clip, bypass_pim=True, no_refine=True)
        tgt = torch.from_numpy(tgt_clip.frames[0].transpose(2, 0, 1)).double()
        want = to_numpy_image(micro_backbone.decoder(micro_backbone.encoder(tgt)))
        assert np.array_equal(out.frames[0], want)


class TestAnimateClip:
    def test_neutral_readback_reduces_to_self_swap(self, micro_pipeline):
        """Under the zero extractor, animating equals swapping the target
        onto itself: identical modules run on identical inputs."""
        _, tgt_clip = _render_pair(seed=51)
        tgt_img = tgt_clip.frames[0]
        animated = micro_pipeline.animate_clip(tgt_clip, tgt_img)
        swapped = micro_pipeline.swap_clip(tgt_img, tgt_clip)
        assert np.array_equal(animated.frames[0], swapped.frames[0])

    def test_frame_count_and_audio_from_source(self, micro_pipeline):
        rng = np.random.default_rng(52)
        ident = sample_identity(rng, dim=16)
        lat = sample_latents(rng, identity=ident)
        src_clip = make_clip(
            ident,
            [(lat.pose, lat.expression_scalars)] * 3,
            synced_audio=True,
            size=64,
            seed=52,
        )
        _, tgt_clip = _render_pair(seed=53)
        out = micro_pipeline.animate_clip(src_clip, tgt_clip.frames[0])
        assert len(out) == 3
        assert np.array_equal(out.audio_latents, src_clip.audio_latents)
        assert out.latents_per_frame is None

    def test_shape_transfer_flag_runs(self, micro_pipeline):
        src_clip, tgt_clip = _render_pair(seed=54)
        out = micro_pipeline.animate_clip(src_clip, tgt_clip.frames[0], shape_transfer=True)
        assert len(out) == 1
        assert np.isfinite(out.frames[0]).all()


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


class TestTraining:
    def test_two_runs_bit_identical(self, tmp_path, micro_config, micro_backbone):
        pool = _tiny_pool()
        logs, params = [], []
        for run in range(2):
            pipe = SwapPipeline(micro_config, micro_backbone)
            result = pipe.train(pool=pool, out_dir=tmp_path / f"run{run}")
            logs.append(result["log_lines"])
            params.append(
                {k: v.clone() for k, v in list(pipe.pim.state_dict().items())
                 + list(pipe.refiner.state_dict().items())
                 + list(pipe.discriminator.state_dict().items())}
            )
        assert logs[0] == logs[1]
        for key in params[0]:
            assert torch.equal(params[0][key], params[1][key]), key
        h0 = hashlib.sha256((tmp_path / "run0" / "loss_log.tsv").read_bytes()).hexdigest()
        h1 = hashlib.sha256((tmp_path / "run1" / "loss_log.tsv").read_bytes()).hexdigest()
        assert h0 == h1

    def test_log_format(self, micro_config, micro_backbone):
        pool = _tiny_pool()
        pipe = SwapPipeline(micro_config, micro_backbone)
        result = pipe.train(pool=pool)
        lines = result["log_lines"]
        assert lines[0] == LOG_HEADER
        assert len(lines) == 1 + micro_config.total_steps
        n_cols = len(LOG_HEADER.split("\t"))
        for step, line in enumerate(lines[1:]):
            cols = line.split("\t")
            assert len(cols) == n_cols
            assert int(cols[0]) == step
            for value in cols[1:]:
                assert np.isfinite(float(value))

    def test_output_files_written(self, tmp_path, micro_config, micro_backbone):
        pool = _tiny_pool()
        pipe = SwapPipeline(micro_config, micro_backbone)
        result = pipe.train(pool=pool, out_dir=tmp_path / "out")
        assert (tmp_path / "out" / "loss_log.tsv").exists()
        assert (tmp_path / "out" / "checkpoint.pt").exists()
        assert result["log_path"].endswith("loss_log.tsv")
        content = (tmp_path / "out" / "loss_log.tsv").read_text().rstrip("\n").split("\n")
        assert content == result["log_lines"]

    def test_non_finite_loss_aborts_with_diagnostic(self, tmp_path, micro_config, micro_backbone):
        # poison the critic: images stay finite, the losses do not
        pool = _tiny_pool()
        pipe = SwapPipeline(micro_config, micro_backbone)
        with torch.no_grad():
            next(iter(pipe.discriminator.parameters())).fill_(float("nan"))
        with pytest.raises(RuntimeError, match="non-finite"):
            pipe.train(pool=pool, out_dir=tmp_path / "bad")
        assert (tmp_path / "bad" / "diagnostic.pt").exists()

    def test_step_counter_and_optimizer_states(self, micro_config, micro_backbone):
        pool = _tiny_pool()
        pipe = SwapPipeline(micro_config, micro_backbone)
        assert pipe.step == 0
        pipe.train(pool=pool)
        assert pipe.step == micro_config.total_steps
        assert set(pipe.optimizer_states) == {"generator", "discriminator"}


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------


class TestCheckpoint:
    def test_round_trip_preserves_behavior(self, tmp_path, micro_config, micro_backbone):
        pool = _tiny_pool()
        pipe = SwapPipeline(micro_config, micro_backbone)
        pipe.train(pool=pool)
        path = tmp_path / "ckpt.pt"
        pipe.save_checkpoint(path)
        loaded = SwapPipeline.load_checkpoint(path)
        assert loaded.config == micro_config
        assert loaded.step == micro_config.total_steps
        src_clip, tgt_clip = _render_pair(seed=61)
        out_a, _ = pipe.swap_frame(src_clip.frames[0], tgt_clip.frames[0])
        out_b, _ = loaded.swap_frame(src_clip.frames[0], tgt_clip.frames[0])
        assert torch.equal(out_a, out_b)

    def test_version_check(self, tmp_path, micro_config, micro_backbone):
        pipe = SwapPipeline(micro_config, micro_backbone)
        path = tmp_path / "ckpt.pt"
        pipe.save_checkpoint(path)
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 999
        bad_path = tmp_path / "bad.pt"
        torch.save(payload, bad_path)
        with pytest.raises(ValueError, match="format version"):
            SwapPipeline.load_checkpoint(bad_path)

    def test_save_bytes_deterministic(self, tmp_path, micro_config, micro_backbone):
        pipe = SwapPipeline(micro_config, micro_backbone)
        pipe.save_checkpoint(tmp_path / "a.pt")
        pipe.save_checkpoint(tmp_path / "b.pt")
        ha = hashlib.sha256((tmp_path / "a.pt").read_bytes()).hexdigest()
        hb = hashlib.sha256((tmp_path / "b.pt").read_bytes()).hexdigest()
        assert ha == hb


# ----------------------------------------------------------------------
# benchmark plumbing
# ----------------------------------------------------------------------


class TestBenchmark:
    def test_make_benchmark_structure_and_determinism(self):
        pairs_a = make_benchmark(2, image_size=64, seed=3, n_frames=4)
        pairs_b = make_benchmark(2, image_size=64, seed=3, n_frames=4)
        assert len(pairs_a) == 2
        for (src, tgt), (src_b, tgt_b) in zip(pairs_a, pairs_b):
            assert len(src) == 1 and len(tgt) == 4
            assert src.latents_per_frame is not None
            assert tgt.latents_per_frame is not None
            assert np.array_equal(src.frames[0], src_b.frames[0])
            assert np.array_equal(tgt.frames[2], tgt_b.frames[2])

    def test_source_and_target_identities_distinct(self):
        for src, tgt in make_benchmark(3, image_size=64, seed=4, n_frames=2):
            src_code = src.latents_per_frame[0].identity_code
            tgt_code = tgt.latents_per_frame[0].identity_code
            assert not np.array_equal(src_code, tgt_code)

    def test_save_load_round_trip(self, tmp_path):
        pairs = make_benchmark(2, image_size=64, seed=5, n_frames=3)
        save_benchmark(pairs, tmp_path)
        loaded = load_benchmark(tmp_path)
        assert len(loaded) == 2
        for (src, tgt), (lsrc, ltgt) in zip(pairs, loaded):
            assert np.allclose(lsrc.frames[0], src.frames[0], atol=0.5 / 65535 + 1e-12)
            assert np.allclose(ltgt.frames[-1], tgt.frames[-1], atol=0.5 / 65535 + 1e-12)
            assert np.array_equal(ltgt.audio_latents, tgt.audio_latents)
            assert ltgt.latents_per_frame is not None
            torch.testing.assert_close(
                ltgt.latents_per_frame[0].pose.rotation,
                tgt.latents_per_frame[0].pose.rotation,
                atol=1e-12,
                rtol=0,
            )

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            make_benchmark(0)
        with pytest.raises(ValueError):
            load_benchmark(tmp_path)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


EXPECTED_METRIC_NAMES = [
    "pose_error",
    "expression_error",
    "ear_metric",
    "gaze_error",
    "temporal_consistency",
    "id_similarity",
    "id_retrieval",
    "lse_d",
    "lse_c",
    "lse_d_target_baseline",
    "recon_outside_mask",
    "perceptual_outside_mask",
    "frechet_video",
]


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(2, image_size=64, seed=6, n_frames=6)


class TestEvaluate:
    def test_report_schema(self, micro_pipeline, bench):
        report = micro_pipeline.evaluate(bench, o_max=2)
        assert report["n_pairs"] == 2
        assert report["checkpoint_step"] == 0
        assert report["ablation"] == {"no_warp": False, "no_mask": False, "no_refine": False}
        names = [row["name"] for row in report["metrics"]]
        assert names == EXPECTED_METRIC_NAMES
        for row in report["metrics"]:
            assert row["value"] is None or np.isfinite(row["value"])
            assert isinstance(row["estimator"], str) and row["estimator"]
        # six frames with o_max=2 is enough for every estimator to engage
        by_name = {row["name"]: row["value"] for row in report["metrics"]}
        for name in ("temporal_consistency", "lse_d", "lse_c", "frechet_video"):
            assert by_name[name] is not None
        assert len(report["per_pair"]) == 2
        assert set(report["per_pair"][0]) == {
            "pose_error",
            "expression_error",
            "ear_metric",
            "gaze_error",
            "id_similarity",
            "id_retrieval",
            "recon_outside_mask",
            "perceptual_outside_mask",
        }

    def test_deterministic(self, micro_pipeline, bench):
        a = micro_pipeline.evaluate(bench, o_max=2)
        b = micro_pipeline.evaluate(bench, o_max=2)
        assert a == b

    def test_short_clips_skip_sync_rows(self, micro_pipeline):
        bench = make_benchmark(1, image_size=64, seed=7, n_frames=3)
        report = micro_pipeline.evaluate(bench)
        by_name = {row["name"]: row["value"] for row in report["metrics"]}
        assert by_name["lse_d"] is None
        assert by_name["lse_c"] is None
        assert by_name["frechet_video"] is None  # needs >= 2 pairs
        assert by_name["temporal_consistency"] is not None

    def test_ablation_grid(self, micro_pipeline):
        bench = make_benchmark(1, image_size=64, seed=8, n_frames=2)
        report = micro_pipeline.evaluate(bench, ablation_grid=True)
        grid = report["ablation_grid"]
        assert set(grid) == {"full", "no_warp", "no_mask", "no_refine"}
        for label, rows in grid.items():
            assert [row["name"] for row in rows] == EXPECTED_METRIC_NAMES
        assert report["ablation_grid_note"]

    def test_empty_benchmark_rejected(self, micro_pipeline):
        with pytest.raises(ValueError):
            micro_pipeline.evaluate([])

    def test_latentless_benchmark_rejected(self, micro_pipeline, bench):
        src, tgt = bench[0]
        stripped = Clip(frames=tgt.frames, latents_per_frame=None, audio_latents=tgt.audio_latents)
        with pytest.raises(ValueError, match="scene latents"):
            micro_pipeline.evaluate([(src, stripped)])


# ----------------------------------------------------------------------
# canonical-space visualization
# ----------------------------------------------------------------------


class TestVisualizeCanonical:
    def test_zero_extractor_makes_spaces_coincide(self, micro_pipeline, micro_config):
        """Neutral readbacks mean both fields are the identity, so the
        aligned and canonical statistics are computed from identical
        volumes and must agree exactly."""
        rng = np.random.default_rng(71)
        ident = sample_identity(rng, dim=16)
        traj = [
            (sample_latents(rng, identity=ident).pose, sample_latents(rng, identity=ident).expression_scalars)
            for _ in range(4)
        ]
        clip = make_clip(ident, traj, synced_audio=True, size=64, seed=71)
        out = micro_pipeline.visualize_canonical([clip])
        assert out["n_frames"] == 4
        hw = micro_config.volume_hw
        assert out["aligned_mean"].shape == (3, hw, hw)
        assert out["canonical_mean"].shape == (3, hw, hw)
        assert out["aligned_variance"] == out["canonical_variance"]
        assert np.array_equal(out["aligned_mean"], out["canonical_mean"])

    def test_validation(self, micro_pipeline):
        with pytest.raises(ValueError):
            micro_pipeline.visualize_canonical([])
        _, tgt_clip = _render_pair(seed=72)
        stripped = Clip(frames=tgt_clip.frames, latents_per_frame=None, audio_latents=tgt_clip.audio_latents)
        with pytest.raises(ValueError, match="scene latents"):
            micro_pipeline.visualize_canonical([stripped])
