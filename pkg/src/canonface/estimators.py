"""Pixel-space measurement of eye landmarks, gaze, and mouth openness.

Generated frames have no ground truth, so the fine-grained video metrics
need estimators that read these quantities off the pixels.  Each estimator
is anchored the way a production landmark detector is anchored by a face
box: the caller supplies the known part geometry (identity features) and
head pose of the subject expected in the frame, and the estimator measures
the actual part appearance inside a generous local-coordinate region.

Calibration facts used below (all properties of the renderer):

* the eye reads as a non-skin ellipse with half-axes (eye_r, 0.8*eye_r*a)
  for aperture a, so the ratio of the weighted row/column standard
  deviations of the non-skin blob equals the eye aspect ratio directly;
* iris and pupil are concentric, offset from the eye center by
  0.5*eye_r*sin(yaw) horizontally and 0.5*sclera_ry*sin(pitch) vertically,
  and read as the non-sclera blob inside the sclera ellipse;
* the lip ellipse is a non-skin blob whose vertical half-axis is
  0.018 + 0.06 * mouth_open.

Evaluation reports label values produced here as estimator="pixel", versus
"oracle" for numbers taken from generative ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synthworld
from .synthworld import identity_features, part_local_coords

_Z_EYE = synthworld._Z_EYE
_Z_MOUTH = synthworld._Z_MOUTH
_Z_HEAD = synthworld._Z_HEAD
_Z_NOSE = synthworld._Z_NOSE

# non-skin classifier: mean |rgb - local skin reference| ramp
_NONSKIN_LO = 0.06
_NONSKIN_RAMP = 0.04
# iris classifier: mean |rgb - sclera| ramp, inside the measured sclera ellipse
_SCLERA_REF = np.array([0.92, 0.92, 0.90])
_IRIS_LO = 0.15
_IRIS_RAMP = 0.10
# minimum blob mass (weighted pixel count) to trust a measurement
_MIN_MASS = 3.0
_IRIS_MIN_MASS = 1.5  # the iris covers only a handful of pixels at 64 px

# lip ellipse vertical half-axis: closed height plus growth per unit openness
_LIP_RY_CLOSED = 0.018
_LIP_RY_PER_OPEN = 0.06
# dark mouth-cavity fallback: luminance ramp and vertical half-axis per openness
_CAVITY_LUM = 0.16
_DARK_RAMP = 0.07
_CAVITY_RY_PER_OPEN = 0.036


def _luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _point_in_plane(point3: np.ndarray, R: np.ndarray, T: np.ndarray, z_plane: float):
    """Local (lx, ly) coordinates, in the given part plane, of a posed 3D point.

    The point is posed to image coordinates (q = p @ R + T), then those
    pixel coordinates are inverted through the plane's affine map — the same
    inversion :func:`synthworld.part_local_coords` applies per pixel.
    """
    q = point3 @ R + T
    a2 = R[:2, :2]
    rhs = q[:2] - z_plane * R[2, :2] - T[:2]
    sol = np.linalg.solve(a2.T, rhs)
    return float(sol[0]), float(sol[1])


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


def _weighted_moments(w: np.ndarray, x: np.ndarray, y: np.ndarray, min_mass: float = _MIN_MASS):
    """Weighted centroid and standard deviations; None if mass too small."""
    mass = float(w.sum())
    if mass < min_mass:
        return None
    cx = float((w * x).sum() / mass)
    cy = float((w * y).sum() / mass)
    sx = float(np.sqrt((w * (x - cx) ** 2).sum() / mass))
    sy = float(np.sqrt((w * (y - cy) ** 2).sum() / mass))
    return cx, cy, sx, sy, mass


@dataclass
class EyeReading:
    """Pixel measurement of both eyes, in ground-truth-compatible layout."""

    landmarks: np.ndarray  # (2, 6, 2) posed image-plane coordinates
    gaze: np.ndarray  # unit 3-vector, scene frame
    ear_value: float
    valid: bool  # False when a blob was too faint to measure


def measure_eyes(frame: np.ndarray, identity_code: np.ndarray, pose) -> EyeReading:
    """Estimate the six-landmark hexagon per eye, the gaze, and the EAR.

    ``pose`` is the driving MotionParams (known head pose); ``identity_code``
    is the identity whose geometry the frame is expected to show.  Both only
    anchor the measurement regions -- apertures, centers, and pupil offsets
    are measured from the pixels.
    """
    img = np.asarray(frame, dtype=np.float64)
    size = img.shape[0]
    f = identity_features(identity_code)
    R = pose.rotation.detach().cpu().numpy()
    T = pose.translation.detach().cpu().numpy()
    lx, ly = part_local_coords(size, R, T, _Z_EYE)
    hx, hy = part_local_coords(size, R, T, _Z_HEAD)
    in_head = (hx / f["head_rx"]) ** 2 + (hy / f["head_ry"]) ** 2 <= 0.92

    landmarks = np.zeros((2, 6, 2))
    gaze_vecs = []
    ears = []
    valid = True
    for e_idx, sx_sign in enumerate((-1.0, 1.0)):
        ecx = sx_sign * f["eye_dx"]
        ecy = f["eye_y"]
        half_w = 1.25 * f["eye_r"]
        half_h = 1.0 * f["eye_r"]
        box = (np.abs(lx - ecx) <= half_w) & (np.abs(ly - ecy) <= half_h) & in_head
        ring = box & ~((np.abs(lx - ecx) <= 0.8 * half_w) & (np.abs(ly - ecy) <= 0.8 * half_h))
        if ring.sum() < 4 or box.sum() < 9:
            valid = False
            skin_ref = np.array([f["skin_r"], f["skin_g"], f["skin_b"]])
        else:
            skin_ref = np.median(img[ring], axis=0)

        dist = np.abs(img - skin_ref.reshape(1, 1, 3)).mean(axis=2)
        w_eye = np.clip((dist - _NONSKIN_LO) / _NONSKIN_RAMP, 0.0, 1.0) * box
        mom = _weighted_moments(w_eye, lx, ly)
        if mom is None:
            valid = False
            cx, cy = ecx, ecy
            re = f["eye_r"]
            v = 0.8 * f["eye_r"] * 0.5
        else:
            cx, cy, s_col, s_row, _ = mom
            re = max(2.0 * s_col, 1e-6)
            v = 2.0 * s_row
        ears.append(v / re)

        # landmark hexagon: measured center, measured extents, known plane
        offsets = np.array(
            [
                [-re, 0.0],
                [-0.45 * re, -v],
                [0.45 * re, -v],
                [re, 0.0],
                [0.45 * re, v],
                [-0.45 * re, v],
            ]
        )
        local3 = np.column_stack(
            [cx + offsets[:, 0], cy + offsets[:, 1], np.full(6, _Z_EYE)]
        )
        landmarks[e_idx] = (local3 @ R + T)[:, :2]

        # iris+pupil: the non-sclera blob inside the sclera ellipse.  It
        # shares the pupil's center and covers ~10x more pixels, which
        # matters at 64 px where the pupil alone is sub-pixel.  Two passes:
        # a conservative interior gate (the sclera's own anti-aliased rim is
        # also non-sclera-colored and would drag the centroid toward the eye
        # center), then a re-centered gate that admits the full iris.
        d_scl = np.abs(img - _SCLERA_REF.reshape(1, 1, 3)).mean(axis=2)
        w_scl = np.clip((d_scl - _IRIS_LO) / _IRIS_RAMP, 0.0, 1.0) * box
        rho2 = ((lx - cx) / max(0.68 * re, 1e-6)) ** 2 + ((ly - cy) / max(0.80 * v, 1e-6)) ** 2
        momp = _weighted_moments(w_scl * (rho2 <= 1.0), lx, ly, min_mass=_IRIS_MIN_MASS)
        if momp is not None:
            rho2 = ((lx - momp[0]) / max(0.58 * re, 1e-6)) ** 2 + (
                (ly - momp[1]) / max(0.90 * v, 1e-6)
            ) ** 2
            momp = _weighted_moments(w_scl * (rho2 <= 1.0), lx, ly, min_mass=_IRIS_MIN_MASS) or momp
        if momp is None:
            sin_yaw = 0.0
            sin_pitch = 0.0
        else:
            pcx, pcy = momp[0], momp[1]
            sin_yaw = np.clip((pcx - cx) / (0.5 * re), -0.999, 0.999)
            sin_pitch = np.clip((pcy - cy) / max(0.5 * v, 1e-6), -0.999, 0.999)
        g_local = np.array(
            [
                sin_yaw,
                sin_pitch,
                -np.sqrt(max((1.0 - sin_yaw**2) * (1.0 - sin_pitch**2), 1e-12)),
            ]
        )
        g = g_local @ R
        gaze_vecs.append(g / np.linalg.norm(g))

    gaze = gaze_vecs[0] + gaze_vecs[1]
    gaze = gaze / np.linalg.norm(gaze)
    return EyeReading(
        landmarks=landmarks,
        gaze=gaze,
        ear_value=float(0.5 * (ears[0] + ears[1])),
        valid=valid,
    )


def measure_mouth(frame: np.ndarray, identity_code: np.ndarray, pose) -> float:
    """Estimate mouth openness in [0, 1] from the lip ellipse's height.

    The lip ellipse has vertical half-axis 0.018 + 0.06*mouth_open, so the
    full vertical extent of the non-skin mouth blob is a linear readout of
    openness that stays measurable (unlike the cavity, which is sub-pixel at
    64 px for small openings).  Half a pixel is subtracted for the
    anti-aliased rim.
    """
    img = np.asarray(frame, dtype=np.float64)
    size = img.shape[0]
    f = identity_features(identity_code)
    R = pose.rotation.detach().cpu().numpy()
    T = pose.translation.detach().cpu().numpy()
    lx, ly = part_local_coords(size, R, T, _Z_MOUTH)
    hx, hy = part_local_coords(size, R, T, _Z_HEAD)
    # 0.88 (vs the eyes' 0.92) keeps the head's anti-aliased rim out even at
    # 64 px, where the rim band reaches rho^2 ~ 0.90
    in_head = (hx / f["head_rx"]) ** 2 + (hy / f["head_ry"]) ** 2 <= 0.88

    # the nose tip (darker skin, hence "non-skin") can dip into the mouth
    # region; mask out its exact projection onto the mouth plane
    nose_y = 0.5 * (f["eye_y"] + f["mouth_y"]) + 0.02
    nlx, nly = _point_in_plane(np.array([0.0, nose_y, _Z_NOSE]), R, T, _Z_MOUTH)
    pad = 0.02
    not_nose = ((lx - nlx) / (f["nose_r"] + pad)) ** 2 + (
        (ly - nly) / (1.4 * f["nose_r"] + pad)
    ) ** 2 > 1.0

    y_lo = f["mouth_y"] - 0.06
    y_hi = f["mouth_y"] + 0.22
    box = (np.abs(lx) <= 1.5 * f["mouth_w"]) & (ly >= y_lo) & (ly <= y_hi) & in_head & not_nose
    inner = (np.abs(lx) <= 1.15 * f["mouth_w"]) & (ly >= y_lo + 0.01) & (ly <= y_hi) & in_head & not_nose
    ring = box & ~inner
    if ring.sum() < 4 or box.sum() < 9:
        return 0.0
    skin_ref = np.median(img[ring], axis=0)
    dist = np.abs(img - skin_ref.reshape(1, 1, 3)).mean(axis=2)
    w = np.clip((dist - _NONSKIN_LO) / _NONSKIN_RAMP, 0.0, 1.0) * inner
    half_px = 0.5 * (2.0 / size)  # anti-aliased rim deflation

    def blob_height(weights: np.ndarray):
        """Vertical full extent (2 * 2*sigma_row) of a trimmed weighted blob.

        Second moments amplify stray mass (errors scale by 1/0.06 in the
        openness map), so the blob is first trimmed to a lip-height window
        around its robust vertical center.
        """
        if weights.sum() < _MIN_MASS:
            return None
        med = _weighted_median(ly[weights > 0], weights[weights > 0])
        mom = _weighted_moments(weights * (np.abs(ly - med) <= 0.12), lx, ly)
        if mom is None:
            return None
        return 2.0 * mom[3] - half_px

    m_hat = 0.0
    ry_hat = blob_height(w)
    if ry_hat is not None:
        m_hat = float(np.clip((ry_hat - _LIP_RY_CLOSED) / _LIP_RY_PER_OPEN, 0.0, 1.0))
    # dark-cavity fallback: identities whose lip color sits near their skin
    # color under-read above, but the cavity interior stays dark.  Gating by
    # the non-skin weight too keeps heavily shaded skin (dark but on-color)
    # out of the dark blob.
    w_dark = np.clip((_CAVITY_LUM - _luminance(img)) / _DARK_RAMP, 0.0, 1.0) * w
    ry_cav = blob_height(w_dark)
    if ry_cav is not None:
        m_hat = max(m_hat, float(np.clip(ry_cav / _CAVITY_RY_PER_OPEN, 0.0, 1.0)))
    return m_hat


def video_sync_embedding(frames, anchors) -> np.ndarray:
    """Audio-space embedding of a frame sequence via measured mouth openness.

    ``anchors`` is a list of (identity_code, MotionParams) per frame.  The
    measured openness sequence is pushed through the exact mouth-to-audio
    affine map, so a perfectly rendered synced clip lands on its own audio
    latents.
    """
    if len(frames) != len(anchors):
        raise ValueError("need one (identity, pose) anchor per frame")
    mouth = np.array(
        [measure_mouth(fr, ident, pose) for fr, (ident, pose) in zip(frames, anchors)]
    )
    return synthworld.mouth_to_audio(mouth)
