"""Fine-grained video evaluation metrics.

All functions here are pure numpy oracles: eye-aspect-ratio tracking, gaze
chord distance, block-matching optical flow and flow-based temporal
consistency, lip-sync error distance/confidence over pluggable embeddings,
identity similarity/retrieval over pluggable embedders, and the Gaussian
Fréchet distance used by FID/FVD-style scores.

Estimator dependencies (landmarks, gaze, sync and video embeddings) are
passed in, never computed here; the evaluation layer decides whether numbers
come from synthetic-world oracles or learned estimators and labels them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def ear(landmarks: np.ndarray) -> float:
    """Eye aspect ratio of six landmarks: (|p2-p6| + |p3-p5|) / (2 |p1-p4|).

    Landmark order: p1/p4 horizontal corners, p2/p3 top, p6/p5 bottom (rows
    0..5 = p1..p6).  Invariant under rigid rotation and uniform scaling.
    """
    p = np.asarray(landmarks, dtype=np.float64)
    if p.shape != (6, 2):
        raise ValueError(f"expected (6, 2) landmarks, got {p.shape}")
    horiz = np.linalg.norm(p[0] - p[3])
    if horiz < 1e-12:
        raise ValueError("degenerate eye corners: |p1 - p4| ~ 0, EAR undefined")
    vert = np.linalg.norm(p[1] - p[5]) + np.linalg.norm(p[2] - p[4])
    return float(vert / (2.0 * horiz))


def ear_metric(video_a_landmarks, video_b_landmarks) -> float:
    """Mean |EAR_a - EAR_b| per frame, scaled by 100.

    Each argument is a sequence of (6, 2) landmark arrays (one eye per frame;
    callers average both eyes upstream if desired).
    """
    if len(video_a_landmarks) != len(video_b_landmarks):
        raise ValueError("landmark sequences must have equal length")
    if len(video_a_landmarks) == 0:
        raise ValueError("landmark sequences must be nonempty")
    diffs = [abs(ear(a) - ear(b)) for a, b in zip(video_a_landmarks, video_b_landmarks)]
    return 100.0 * float(np.mean(diffs))


def gaze_error(gaze_a: np.ndarray, gaze_b: np.ndarray) -> float:
    """Mean per-frame L2 (chord) distance between unit gaze vectors.

    Inputs (T, 3); non-unit rows are normalized (the evaluation layer flags
    that condition in its report).  A yaw difference of θ at equal pitch
    yields 2·sin(θ/2).
    """
    a = np.asarray(gaze_a, dtype=np.float64)
    b = np.asarray(gaze_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected matching (T, 3) arrays, got {a.shape} vs {b.shape}")
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def _to_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 3 and f.shape[2] == 3:
        return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]
    if f.ndim == 2:
        return f
    raise ValueError(f"expected (H, W) or (H, W, 3) frame, got {f.shape}")


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    img = img[:h2, :w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


_BLOCK = 8
_RADIUS = 4
_LEVELS = 3


def optical_flow(frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
    """Coarse-to-fine block-matching optical flow from frame_a to frame_b.

    Three pyramid levels, 8x8 blocks, integer search radius 4 per level, SAD
    cost.  Returns (H, W, 2) per-pixel displacement (dx, dy) in pixels:
    content at (x, y) in frame_a is matched at (x + dx, y + dy) in frame_b.
    Deterministic: equal-cost candidates are resolved toward the smallest
    total displacement (zero first), then by (dy, dx) order.
    """
    ga = _to_gray(frame_a)
    gb = _to_gray(frame_b)
    if ga.shape != gb.shape:
        raise ValueError(f"frame size mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < _BLOCK * 2 ** (_LEVELS - 1):
        raise ValueError(f"frames must be at least {_BLOCK * 2 ** (_LEVELS - 1)} px on each side")

    pyr_a = [ga]
    pyr_b = [gb]
    for _ in range(_LEVELS - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    # candidate displacements sorted by (|d|_1, dy, dx): argmin over this
    # ordering implements the zero-displacement tie-break
    cands = [(dy, dx) for dy in range(-_RADIUS, _RADIUS + 1) for dx in range(-_RADIUS, _RADIUS + 1)]
    cands.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d[0], d[1]))
    cands = np.array(cands)  # (81, 2) as (dy, dx)

    flow = None  # (hb, wb, 2) block flow (dx, dy) at the previous (coarser) level
    for level in range(_LEVELS - 1, -1, -1):
        a = pyr_a[level]
        b = pyr_b[level]
        h, w = a.shape
        ys = list(range(0, h - _BLOCK + 1, _BLOCK))
        xs = list(range(0, w - _BLOCK + 1, _BLOCK))
        if ys[-1] + _BLOCK < h:
            ys.append(h - _BLOCK)
        if xs[-1] + _BLOCK < w:
            xs.append(w - _BLOCK)

        if flow is None:
            init = np.zeros((len(ys), len(xs), 2))
        else:
            # upsample block flow from the coarser level, doubling magnitude
            init = np.zeros((len(ys), len(xs), 2))
            for i, y in enumerate(ys):
                for j, x in enumerate(xs):
                    ci = min((y // 2) // _BLOCK, flow.shape[0] - 1)
                    cj = min((x // 2) // _BLOCK, flow.shape[1] - 1)
                    init[i, j] = 2.0 * flow[ci, cj]
        init = np.round(init).astype(np.int64)

        pad = _RADIUS + int(np.abs(init).max()) + 1
        b_pad = np.pad(b, pad, mode="edge")
        new_flow = np.zeros((len(ys), len(xs), 2))
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                block = a[y : y + _BLOCK, x : x + _BLOCK]
                oy = y + int(init[i, j, 1]) + pad - _RADIUS
                ox = x + int(init[i, j, 0]) + pad - _RADIUS
                region = b_pad[oy : oy + _BLOCK + 2 * _RADIUS, ox : ox + _BLOCK + 2 * _RADIUS]
                windows = np.lib.stride_tricks.sliding_window_view(region, (_BLOCK, _BLOCK))
                costs = np.abs(windows - block).sum(axis=(2, 3))  # (9, 9) indexed [dy+R, dx+R]
                k = int(np.argmin(costs[cands[:, 0] + _RADIUS, cands[:, 1] + _RADIUS]))
                dy, dx = cands[k]
                new_flow[i, j, 0] = init[i, j, 0] + dx
                new_flow[i, j, 1] = init[i, j, 1] + dy
        flow = new_flow

    h, w = ga.shape
    dense = np.zeros((h, w, 2))
    ys = list(range(0, h - _BLOCK + 1, _BLOCK))
    xs = list(range(0, w - _BLOCK + 1, _BLOCK))
    if ys[-1] + _BLOCK < h:
        ys.append(h - _BLOCK)
    if xs[-1] + _BLOCK < w:
        xs.append(w - _BLOCK)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            dense[y : y + _BLOCK, x : x + _BLOCK] = flow[i, j]
    return dense


def temporal_consistency(video_target, video_swapped) -> float:
    """Mean endpoint error between the two videos' consecutive-frame flows.

    For each consecutive frame pair t -> t+1, computes optical flow in both
    videos and averages the per-pixel L2 difference; the result is the mean
    over all pairs.  Symmetric in its arguments; 0 when the videos match.
    """
    if len(video_target) != len(video_swapped):
        raise ValueError("videos must have equal frame counts")
    if len(video_target) < 2:
        raise ValueError("need at least two frames")
    for ft, fs in zip(video_target, video_swapped):
        if np.asarray(ft).shape != np.asarray(fs).shape:
            raise ValueError("frame size mismatch between videos")
    errors = []
    for t in range(len(video_target) - 1):
        f1 = optical_flow(video_target[t], video_target[t + 1])
        f2 = optical_flow(video_swapped[t], video_swapped[t + 1])
        errors.append(float(np.mean(np.linalg.norm(f1 - f2, axis=2))))
    return float(np.mean(errors))


@dataclass
class SyncEmbeddings:
    """Per-frame video and audio embeddings with a search window for sync scoring."""

    video_emb: np.ndarray
    audio_emb: np.ndarray
    o_max: int = 15

    def __post_init__(self):
        self.video_emb = np.asarray(self.video_emb, dtype=np.float64)
        self.audio_emb = np.asarray(self.audio_emb, dtype=np.float64)
        if self.video_emb.shape != self.audio_emb.shape or self.video_emb.ndim != 2:
            raise ValueError(
                f"video/audio embeddings must be matching (T, d) arrays, got "
                f"{self.video_emb.shape} vs {self.audio_emb.shape}"
            )
        if self.video_emb.shape[0] <= 2 * self.o_max:
            raise ValueError(f"need T > {2 * self.o_max} frames, got {self.video_emb.shape[0]}")


def _sync_distance_table(emb: SyncEmbeddings) -> np.ndarray:
    """d[t, o+o_max] = ||video[t] - audio[t+o]|| for valid t."""
    t_lo, t_hi = emb.o_max, emb.video_emb.shape[0] - emb.o_max
    offsets = range(-emb.o_max, emb.o_max + 1)
    rows = []
    for t in range(t_lo, t_hi):
        rows.append([np.linalg.norm(emb.video_emb[t] - emb.audio_emb[t + o]) for o in offsets])
    return np.asarray(rows)


def sync_metrics(emb: SyncEmbeddings) -> tuple[float, float]:
    """Lip-sync error distance and confidence over an offset window.

    LSE-D = mean over valid frames of the minimum embedding distance across
    offsets in [-o_max, o_max]; LSE-C = mean of (median - min) across the
    same offsets.  Lower LSE-D and higher LSE-C indicate better sync.
    """
    d = _sync_distance_table(emb)
    lse_d = float(np.mean(d.min(axis=1)))
    lse_c = float(np.mean(np.median(d, axis=1) - d.min(axis=1)))
    return lse_d, lse_c


def best_sync_offset(emb: SyncEmbeddings) -> int:
    """Offset o minimizing the mean distance; positive means audio lags video.

    With audio delayed by k frames (audio[t] = video[t-k]), the minimizer is
    o = +k: the video frame t matches audio entry t+k.
    """
    d = _sync_distance_table(emb)
    offsets = np.arange(-emb.o_max, emb.o_max + 1)
    return int(offsets[np.argmin(d.mean(axis=0))])


def _embed(embedder, image) -> np.ndarray:
    v = embedder.embed(image)
    if hasattr(v, "detach"):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype=np.float64).reshape(-1)


def id_similarity(source_img, swapped_frames, embedder) -> float:
    """Mean cosine similarity between the source and each swapped frame."""
    if len(swapped_frames) == 0:
        raise ValueError("need at least one swapped frame")
    s = _embed(embedder, source_img)
    s = s / np.linalg.norm(s)
    sims = []
    for fr in swapped_frames:
        e = _embed(embedder, fr)
        sims.append(float(s @ (e / np.linalg.norm(e))))
    return float(np.mean(sims))


def id_retrieval(source_imgs, swapped_frames, gallery, embedder, flags: dict | None = None) -> float:
    """Percentage of swapped frames retrieving the source identity from a gallery.

    ``gallery`` is one reference image per identity.  Each source image's own
    nearest gallery entry defines its identity; a swapped frame scores when
    its nearest entry (cosine, ties to the lowest index) matches that of its
    source.  ``source_imgs`` holds either one image or one per frame.  If
    ``flags`` is given, the count of degenerate cosine ties is recorded under
    ``"degenerate_ties"``.
    """
    if len(gallery) == 0:
        raise ValueError("gallery must be nonempty")
    if len(source_imgs) not in (1, len(swapped_frames)):
        raise ValueError("source_imgs must hold one image or one per swapped frame")
    g = np.stack([_embed(embedder, img) for img in gallery])
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    ties = 0

    def nearest(image) -> int:
        nonlocal ties
        e = _embed(embedder, image)
        e = e / np.linalg.norm(e)
        sims = g @ e
        best = int(np.argmax(sims))  # argmax takes the lowest index on ties
        if np.sum(np.isclose(sims, sims[best], atol=1e-12)) > 1:
            ties += 1
        return best

    src_ids = [nearest(img) for img in source_imgs]
    if len(src_ids) == 1:
        src_ids = src_ids * len(swapped_frames)
    hits = sum(1 for fr, sid in zip(swapped_frames, src_ids) if nearest(fr) == sid)
    if flags is not None:
        flags["degenerate_ties"] = ties
    return 100.0 * hits / len(swapped_frames)


def _sqrt_psd_eigs(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition square root of a symmetric PSD matrix.

    Negative eigenvalues (numerical noise) are clamped to zero.
    """
    vals, vecs = np.linalg.eigh(m)
    return np.sqrt(np.clip(vals, 0.0, None)), vecs


def gaussian_moments(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance (unbiased, rowvar=False) of an (N, d) embedding set."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need (N >= 2, d) embeddings, got {x.shape}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Fréchet distance between two Gaussians.

    ||mu1 - mu2||^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^{1/2}), with the matrix
    square root computed as sqrt(S1 cov2 S1) for S1 = sqrt(cov1) so that only
    symmetric eigendecompositions (with negative-eigenvalue clamping) are
    needed.  Symmetric in the two Gaussians and zero iff the moments match.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.shape[0], mu1.shape[0]):
        raise ValueError("moment shape mismatch")
    for c in (cov1, cov2):
        if np.abs(c - c.T).max() > 1e-8:
            raise ValueError("covariance is not symmetric within 1e-8")
    s1_vals, s1_vecs = _sqrt_psd_eigs(0.5 * (cov1 + cov1.T))
    s1 = (s1_vecs * s1_vals) @ s1_vecs.T
    inner = s1 @ (0.5 * (cov2 + cov2.T)) @ s1
    cross_vals, _ = _sqrt_psd_eigs(0.5 * (inner + inner.T))
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross_vals.sum())
    return max(val, 0.0)
