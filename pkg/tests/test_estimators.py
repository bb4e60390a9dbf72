"""Pixel estimators: calibration floors against ground truth, determinism."""

import numpy as np
import pytest
import torch

from canonface.estimators import measure_eyes, measure_mouth, video_sync_embedding
from canonface.motion import MotionParams, euler_to_matrix
from canonface.synthworld import (
    audio_mouth_readout,
    expression_from_scalars,
    make_clip,
    make_scene_latents,
    render_face,
    sample_identity,
    sample_latents,
    smooth_trajectory,
)
from canonface.util import DTYPE


def _sweep(size: int, n: int, seed: int):
    """Accuracy sweep over the full pose/expression range."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        lat = sample_latents(rng)
        img, gt = render_face(lat, size)
        m = measure_mouth(img, lat.identity_code, lat.pose)
        r = measure_eyes(img, lat.identity_code, lat.pose)
        rows.append(
            dict(
                m_gt=lat.expression_scalars[1],
                m_est=m,
                e_gt=gt.ear_value,
                e_est=r.ear_value,
                g_err=float(np.arccos(np.clip(r.gaze @ gt.gaze, -1.0, 1.0))),
            )
        )
    return rows


def _stats(rows, gt_key, est_key):
    gt = np.array([r[gt_key] for r in rows])
    est = np.array([r[est_key] for r in rows])
    err = np.abs(gt - est)
    return float(err.mean()), float(err.max()), float(np.corrcoef(gt, est)[0, 1])


@pytest.fixture(scope="module")
def sweep64():
    return _sweep(64, 60, seed=1234)


@pytest.fixture(scope="module")
def sweep128():
    return _sweep(128, 40, seed=5678)


# Floors frozen from a calibration sweep at these exact seeds and counts;
# bounds carry ~20-40% headroom so they trip on regressions, not sample noise.

def test_mouth_floor_64(sweep64):
    mean, worst, corr = _stats(sweep64, "m_gt", "m_est")
    assert mean <= 0.23, mean
    assert worst <= 0.55, worst
    assert corr >= 0.90, corr


def test_mouth_floor_128(sweep128):
    mean, worst, corr = _stats(sweep128, "m_gt", "m_est")
    assert mean <= 0.14, mean
    assert worst <= 0.38, worst
    assert corr >= 0.94, corr


def test_ear_floor_64(sweep64):
    mean, worst, corr = _stats(sweep64, "e_gt", "e_est")
    assert mean <= 0.055, mean
    assert worst <= 0.20, worst
    assert corr >= 0.95, corr


def test_ear_floor_128(sweep128):
    mean, worst, corr = _stats(sweep128, "e_gt", "e_est")
    assert mean <= 0.028, mean
    assert worst <= 0.10, worst
    assert corr >= 0.98, corr


def test_gaze_floor_64(sweep64):
    errs = np.array([r["g_err"] for r in sweep64])
    assert errs.mean() <= 0.28, errs.mean()
    assert errs.max() <= 0.72, errs.max()


def test_gaze_floor_128(sweep128):
    errs = np.array([r["g_err"] for r in sweep128])
    assert errs.mean() <= 0.14, errs.mean()
    assert errs.max() <= 0.62, errs.max()


# ---------------------------------------------------------------------------
# structural behavior
# ---------------------------------------------------------------------------

def _frontal_latents(code, mouth_open: float):
    return make_scene_latents(
        code,
        torch.eye(3, dtype=DTYPE),
        np.zeros(3),
        np.array([0.8, mouth_open, 0.0, 0.0]),
    )


def test_mouth_readout_monotone_frontal():
    rng = np.random.default_rng(77)
    code = sample_identity(rng)
    openings = [0.0, 0.25, 0.5, 0.75, 1.0]
    est = []
    for m in openings:
        lat = _frontal_latents(code, m)
        img, _ = render_face(lat, 64)
        est.append(measure_mouth(img, lat.identity_code, lat.pose))
    for a, b in zip(est, est[1:]):
        assert b >= a - 0.05, est
    assert est[0] <= 0.15, est
    assert est[-1] >= 0.7, est


def test_measurements_deterministic():
    rng = np.random.default_rng(88)
    lat = sample_latents(rng)
    img, _ = render_face(lat, 64)
    assert measure_mouth(img, lat.identity_code, lat.pose) == measure_mouth(
        img, lat.identity_code, lat.pose
    )
    r1 = measure_eyes(img, lat.identity_code, lat.pose)
    r2 = measure_eyes(img, lat.identity_code, lat.pose)
    assert np.array_equal(r1.landmarks, r2.landmarks)
    assert np.array_equal(r1.gaze, r2.gaze)
    assert r1.ear_value == r2.ear_value


def test_eye_reading_layout():
    rng = np.random.default_rng(99)
    lat = sample_latents(rng)
    img, _ = render_face(lat, 64)
    r = measure_eyes(img, lat.identity_code, lat.pose)
    assert r.landmarks.shape == (2, 6, 2)
    assert abs(np.linalg.norm(r.gaze) - 1.0) < 1e-9
    assert np.isfinite(r.ear_value)


def test_video_sync_embedding_round_trip():
    """Measured sync embedding of a synced clip tracks its mouth sequence."""
    rng = np.random.default_rng(111)
    code = sample_identity(rng)
    traj = smooth_trajectory(rng, 24)
    clip = make_clip(code, traj, synced_audio=True, seed=9)
    anchors = [(lat.identity_code, lat.pose) for lat in clip.latents_per_frame]
    emb = video_sync_embedding(clip.frames, anchors)
    assert emb.shape == clip.audio_latents.shape
    measured = audio_mouth_readout(emb)
    true_mouth = np.array([lat.expression_scalars[1] for lat in clip.latents_per_frame])
    assert np.corrcoef(measured, true_mouth)[0, 1] >= 0.9


def test_video_sync_embedding_anchor_validation():
    rng = np.random.default_rng(112)
    code = sample_identity(rng)
    lat = _frontal_latents(code, 0.5)
    img, _ = render_face(lat, 64)
    with pytest.raises(ValueError):
        video_sync_embedding([img, img], [(lat.identity_code, lat.pose)])
