"""Procedural synthetic-face world with exact ground truth.

Faces are 2.5-D procedural drawings: every part (head ellipse, eyes, nose,
mouth) lives on its own constant-depth plane in face-local coordinates and is
posed by the same row-vector transform the keypoint model uses,
``q = p @ R + T``.  Because each part's plane has constant z, the pixel->local
map is an exact affine inverse per part, so rendering is analytic, vectorized
and deterministic — equal latents give bit-equal images.

Ground truth comes from the same latents that drive the renderer: posed
keypoints, per-eye landmark hexagons, a binary face mask, the gaze direction
and the eye-aspect ratio, so every downstream estimator has an oracle to be
checked against.

Identity enters only through a fixed seeded linear projection of the identity
code onto geometry/color features; expression offsets are identity
-independent by construction, which keeps identity and motion exactly
decoupled in the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .metrics import ear
from .motion import KeypointSet, MotionParams, compose_keypoints, euler_to_matrix
from .util import DTYPE

ID_DIM = 16
AUDIO_DIM = 8
N_KEYPOINTS = 10

# identity code -> geometry/color features: fixed projection, tanh-squashed
# into the ranges below.  (name, low, high)
_FEATURE_RANGES = (
    ("head_rx", 0.52, 0.72),
    ("head_ry", 0.60, 0.80),
    ("eye_dx", 0.22, 0.34),
    ("eye_y", -0.24, -0.12),
    ("eye_r", 0.07, 0.12),
    ("mouth_y", 0.28, 0.42),
    ("mouth_w", 0.14, 0.26),
    ("nose_r", 0.04, 0.07),
    ("skin_r", 0.45, 0.90),
    ("skin_g", 0.35, 0.80),
    ("skin_b", 0.30, 0.75),
    ("iris_r", 0.05, 0.50),
    ("iris_g", 0.10, 0.55),
    ("iris_b", 0.15, 0.60),
    ("lip_r", 0.45, 0.85),
    ("lip_g", 0.05, 0.30),
    ("lip_b", 0.08, 0.35),
)

# depth planes (scene z) of the drawn parts / keypoints
_Z_EYE = 0.05
_Z_EYE_CORNER = 0.03
_Z_MOUTH = 0.04
_Z_NOSE = 0.14
_Z_CHIN = 0.02
_Z_HEAD = 0.0

_BG_TOP = np.array([0.10, 0.11, 0.14])
_BG_BOTTOM = np.array([0.18, 0.20, 0.24])

_projection_cache: dict[int, np.ndarray] = {}


def _identity_projection(dim: int) -> np.ndarray:
    """Fixed (n_features, dim) projection used to derive face features."""
    if dim not in _projection_cache:
        rng = np.random.default_rng(20240601 + dim)
        _projection_cache[dim] = rng.standard_normal((len(_FEATURE_RANGES), dim))
    return _projection_cache[dim]


def identity_features(identity_code: np.ndarray) -> dict[str, float]:
    """Map a unit identity code to renderer geometry and color features."""
    code = np.asarray(identity_code, dtype=np.float64).reshape(-1)
    raw = _identity_projection(code.shape[0]) @ code
    squashed = 0.5 * (np.tanh(1.2 * raw) + 1.0)
    return {
        name: lo + (hi - lo) * s
        for (name, lo, hi), s in zip(_FEATURE_RANGES, squashed)
    }


def canonical_keypoints(identity_code: np.ndarray) -> KeypointSet:
    """Identity-specific canonical keypoints (neutral pose, zero expression).

    Layout (n = 10): left/right eye centers, left-outer/left-inner/right-inner
    /right-outer eye corners, left/right mouth corners, nose tip, chin.
    """
    f = identity_features(identity_code)
    nose_y = 0.5 * (f["eye_y"] + f["mouth_y"]) + 0.02
    pts = np.array(
        [
            [-f["eye_dx"], f["eye_y"], _Z_EYE],
            [f["eye_dx"], f["eye_y"], _Z_EYE],
            [-f["eye_dx"] - f["eye_r"], f["eye_y"], _Z_EYE_CORNER],
            [-f["eye_dx"] + f["eye_r"], f["eye_y"], _Z_EYE_CORNER],
            [f["eye_dx"] - f["eye_r"], f["eye_y"], _Z_EYE_CORNER],
            [f["eye_dx"] + f["eye_r"], f["eye_y"], _Z_EYE_CORNER],
            [-f["mouth_w"], f["mouth_y"], _Z_MOUTH],
            [f["mouth_w"], f["mouth_y"], _Z_MOUTH],
            [0.0, nose_y, _Z_NOSE],
            [0.0, 0.93 * f["head_ry"], _Z_CHIN],
        ]
    )
    return KeypointSet(torch.as_tensor(pts, dtype=DTYPE))


def expression_from_scalars(scalars: np.ndarray) -> torch.Tensor:
    """Per-keypoint expression offsets (10, 3) from the 4 expression scalars.

    Identity-independent by design: only the mouth corners move (down with
    mouth opening, tracking the rendered mouth-ellipse center).
    """
    scalars = np.asarray(scalars, dtype=np.float64).reshape(-1)
    if scalars.shape[0] != 4:
        raise ValueError(f"expected 4 expression scalars, got {scalars.shape[0]}")
    mouth_open = float(scalars[1])
    e = torch.zeros((N_KEYPOINTS, 3), dtype=DTYPE)
    e[6, 1] = 0.06 * mouth_open
    e[7, 1] = 0.06 * mouth_open
    return e


@dataclass
class SceneLatents:
    """Complete description of one rendered frame.

    ``expression_scalars`` = (eye_aperture, mouth_open, gaze_yaw, gaze_pitch);
    the pose's expression rows must equal ``expression_from_scalars`` of the
    scalars so keypoints and pixels cannot disagree.  Use
    :func:`make_scene_latents` to construct consistent instances.
    """

    identity_code: np.ndarray
    pose: MotionParams
    expression_scalars: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.identity_code = np.asarray(self.identity_code, dtype=np.float64).reshape(-1)
        norm = float(np.linalg.norm(self.identity_code))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"identity code must have unit norm, got {norm:.6g}")
        self.expression_scalars = np.asarray(self.expression_scalars, dtype=np.float64).reshape(-1)
        if self.expression_scalars.shape[0] != 4:
            raise ValueError("expression_scalars must be (eye_aperture, mouth_open, gaze_yaw, gaze_pitch)")
        a, m, gy, gp = self.expression_scalars
        if not (0.0 <= a <= 1.0 and 0.0 <= m <= 1.0):
            raise ValueError("eye_aperture and mouth_open must lie in [0, 1]")
        if not (abs(gy) <= 0.5 and abs(gp) <= 0.5):
            raise ValueError("gaze angles must lie in [-0.5, 0.5] rad")
        derived = expression_from_scalars(self.expression_scalars)
        if (self.pose.expression - derived).abs().max() > 1e-9:
            raise ValueError("pose.expression does not match expression_from_scalars(expression_scalars)")


def make_scene_latents(identity_code, rotation, translation, expression_scalars, seed: int = 0) -> SceneLatents:
    """Build consistent SceneLatents (expression rows derived from the scalars)."""
    pose = MotionParams(
        rotation=rotation,
        expression=expression_from_scalars(expression_scalars),
        translation=translation,
    )
    return SceneLatents(identity_code, pose, expression_scalars, seed)


@dataclass
class GroundTruth:
    """Oracle annotations for one rendered frame."""

    keypoints: KeypointSet
    eye_landmarks: np.ndarray  # (2 eyes, 6 points, 2) image-plane scene coords
    face_mask: np.ndarray  # (S, S) binary float
    gaze: np.ndarray  # unit 3-vector
    ear_value: float


@dataclass
class Clip:
    """An ordered sequence of frames with per-frame latents and audio latents.

    ``latents_per_frame`` is None for generated clips (swap/animation
    outputs), whose pixels no longer correspond to any true scene latents.
    """

    frames: list[np.ndarray]
    latents_per_frame: list[SceneLatents] | None
    audio_latents: np.ndarray

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("clip must contain at least one frame")
        shape = self.frames[0].shape
        for fr in self.frames:
            if fr.shape != shape:
                raise ValueError("all frames must share identical dimensions")
        self.audio_latents = np.asarray(self.audio_latents, dtype=np.float64)
        if len(self.frames) != self.audio_latents.shape[0]:
            raise ValueError("frames and audio latents must have equal length")
        if self.latents_per_frame is not None and len(self.latents_per_frame) != len(self.frames):
            raise ValueError("latents_per_frame must match the frame count (or be None)")

    def __len__(self) -> int:
        return len(self.frames)


def _ellipse_alpha(px, py, cx, cy, rx, ry, edge):
    """Anti-aliased ellipse membership: 1 inside, 0 outside, ~1px feather."""
    rho = np.sqrt(((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 + 1e-30)
    return np.clip((1.0 - rho) / edge + 0.5, 0.0, 1.0)


def part_local_coords(size: int, rotation, translation, z_plane: float):
    """Local (x, y) coordinates of every pixel center for one depth plane.

    Parts live on constant-z planes, so the pixel-to-part mapping
    ``[qx qy] = [px py] @ A2 + z*[R20 R21] + [Tx Ty]`` (A2 = upper-left 2x2 of
    the rotation) is exactly invertible.  Returns two (size, size) arrays.
    """
    R = np.asarray(rotation, dtype=np.float64)
    T = np.asarray(translation, dtype=np.float64).reshape(-1)
    coords = (2.0 * np.arange(size) + 1.0) / size - 1.0
    qy, qx = np.meshgrid(coords, coords, indexing="ij")
    inv_a2 = np.linalg.inv(R[:2, :2])
    off = np.array([z_plane * R[2, 0] + T[0], z_plane * R[2, 1] + T[1]]) @ inv_a2
    lx = qx * inv_a2[0, 0] + qy * inv_a2[1, 0] - off[0]
    ly = qx * inv_a2[0, 1] + qy * inv_a2[1, 1] - off[1]
    return lx, ly


def _eye_landmark_offsets(eye_r: float, aperture: float) -> np.ndarray:
    """Six landmark offsets around one eye center (y down, x right).

    Ordering: outer corner, upper-outer, upper-inner, inner corner,
    lower-inner, lower-outer — so landmarks 2/6 and 3/5 form the vertical
    pairs and 1/4 the horizontal pair of the aspect-ratio formula.
    """
    v = 0.8 * eye_r * aperture
    return np.array(
        [
            [-eye_r, 0.0],
            [-0.45 * eye_r, -v],
            [0.45 * eye_r, -v],
            [eye_r, 0.0],
            [0.45 * eye_r, v],
            [-0.45 * eye_r, v],
        ]
    )


def render_face(latents: SceneLatents, size: int) -> tuple[np.ndarray, GroundTruth]:
    """Render one frame and its ground truth.

    Returns an (S, S, 3) float64 image in [0, 1].  Deterministic: no RNG is
    consulted anywhere in the rendering path.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    f = identity_features(latents.identity_code)
    R = latents.pose.rotation.detach().cpu().numpy()
    T = latents.pose.translation.detach().cpu().numpy()
    aperture, mouth_open, gaze_yaw, gaze_pitch = latents.expression_scalars

    # pixel centers in normalized scene coordinates (for the background)
    coords = (2.0 * np.arange(size) + 1.0) / size - 1.0
    qy, _ = np.meshgrid(coords, coords, indexing="ij")

    def local_coords(z_plane: float):
        return part_local_coords(size, R, T, z_plane)

    edge = 2.0 / size  # feather width in normalized units, scaled per part

    img = _BG_TOP + np.multiply.outer((qy + 1.0) / 2.0, _BG_BOTTOM - _BG_TOP)

    def paint(alpha, color):
        nonlocal img
        img = img * (1.0 - alpha[..., None]) + alpha[..., None] * np.asarray(color).reshape(1, 1, 3)

    # head with depth shading + pose-tilt lighting + depth-translation brightness
    hx, hy = local_coords(_Z_HEAD)
    head_alpha = _ellipse_alpha(hx, hy, 0.0, 0.0, f["head_rx"], f["head_ry"], edge / min(f["head_rx"], f["head_ry"]))
    rho2 = (hx / f["head_rx"]) ** 2 + (hy / f["head_ry"]) ** 2
    shade = (0.82 + 0.18 * np.clip(1.0 - rho2, 0.0, 1.0)) * (
        1.0 + 0.30 * (hx / f["head_rx"] * R[2, 0] + hy / f["head_ry"] * R[2, 1])
    ) * (1.0 + 0.35 * T[2])
    skin = np.array([f["skin_r"], f["skin_g"], f["skin_b"]])
    img = img * (1.0 - head_alpha[..., None]) + head_alpha[..., None] * np.clip(
        skin.reshape(1, 1, 3) * shade[..., None], 0.0, 1.0
    )

    # nose
    nx, ny = local_coords(_Z_NOSE)
    nose_y = 0.5 * (f["eye_y"] + f["mouth_y"]) + 0.02
    nose_alpha = _ellipse_alpha(nx, ny, 0.0, nose_y, f["nose_r"], 1.4 * f["nose_r"], edge / f["nose_r"])
    paint(nose_alpha, np.clip(skin * 0.72, 0.0, 1.0))

    # mouth: lips ellipse, cavity when open
    mx, my = local_coords(_Z_MOUTH)
    drop = 0.12 * mouth_open
    mouth_cy = f["mouth_y"] + 0.5 * drop
    mouth_ry = 0.018 + 0.5 * drop
    lip = np.array([f["lip_r"], f["lip_g"], f["lip_b"]])
    paint(_ellipse_alpha(mx, my, 0.0, mouth_cy, f["mouth_w"], mouth_ry, edge / mouth_ry), lip)
    if mouth_open > 0.0:
        cav_ry = 0.6 * (mouth_ry - 0.018) + 1e-6
        cav = _ellipse_alpha(mx, my, 0.0, mouth_cy, 0.8 * f["mouth_w"], cav_ry, edge / max(cav_ry, 0.01))
        paint(cav * min(1.0, mouth_open * 4.0), np.array([0.08, 0.03, 0.03]))

    # eyes: sclera sized by aperture, iris offset by gaze, pupil
    ex, ey = local_coords(_Z_EYE)
    v_half = 0.8 * f["eye_r"] * aperture
    scl_ry = max(v_half, 0.015)
    iris = np.array([f["iris_r"], f["iris_g"], f["iris_b"]])
    for sx in (-1.0, 1.0):
        cx = sx * f["eye_dx"]
        cy = f["eye_y"]
        paint(_ellipse_alpha(ex, ey, cx, cy, f["eye_r"], scl_ry, edge / scl_ry), np.array([0.92, 0.92, 0.90]))
        if aperture > 0.05:
            icx = cx + 0.5 * f["eye_r"] * np.sin(gaze_yaw)
            icy = cy + 0.5 * scl_ry * np.sin(gaze_pitch)
            ir = 0.45 * f["eye_r"]
            open_clip = _ellipse_alpha(ex, ey, cx, cy, f["eye_r"], scl_ry, edge / scl_ry)
            paint(_ellipse_alpha(ex, ey, icx, icy, ir, min(ir, scl_ry * 0.9), edge / ir) * open_clip, iris)
            paint(_ellipse_alpha(ex, ey, icx, icy, 0.45 * ir, min(0.45 * ir, scl_ry * 0.8), edge / ir) * open_clip,
                  np.array([0.03, 0.03, 0.03]))

    img = np.clip(img, 0.0, 1.0)

    # ground truth from the same latents
    keypoints = compose_keypoints(canonical_keypoints(latents.identity_code), latents.pose)
    offsets = _eye_landmark_offsets(f["eye_r"], aperture)
    eye_lms = np.zeros((2, 6, 2))
    for e_idx, sx in enumerate((-1.0, 1.0)):
        local = np.column_stack(
            [sx * f["eye_dx"] + offsets[:, 0], f["eye_y"] + offsets[:, 1], np.full(6, _Z_EYE)]
        )
        posed = local @ R + T
        eye_lms[e_idx] = posed[:, :2]
    ear_value = 0.5 * (ear(eye_lms[0]) + ear(eye_lms[1]))

    g_local = np.array([np.sin(gaze_yaw), np.sin(gaze_pitch), -np.cos(gaze_yaw) * np.cos(gaze_pitch)])
    gaze = g_local @ R
    gaze = gaze / np.linalg.norm(gaze)

    mask_rho2 = (hx / f["head_rx"]) ** 2 + (hy / f["head_ry"]) ** 2
    face_mask = (mask_rho2 <= 1.0).astype(np.float64)

    gt = GroundTruth(
        keypoints=keypoints,
        eye_landmarks=eye_lms,
        face_mask=face_mask,
        gaze=gaze,
        ear_value=ear_value,
    )
    return img, gt


_audio_rng = np.random.default_rng(990331)
_AUDIO_U = _audio_rng.standard_normal(AUDIO_DIM)
_AUDIO_C = 0.1 * _audio_rng.standard_normal(AUDIO_DIM)


def audio_mouth_readout(audio_latents: np.ndarray) -> np.ndarray:
    """Fixed linear readout mapping synced audio latents back to mouth openness."""
    a = np.asarray(audio_latents, dtype=np.float64)
    return (a - _AUDIO_C) @ _AUDIO_U / float(_AUDIO_U @ _AUDIO_U)


def part_mask_stack(latents: SceneLatents, size: int) -> np.ndarray:
    """Binary face/eyes/mouth masks, shape (3, size, size).

    Rasterized from the same part geometry the renderer draws (head ellipse;
    sclera ellipses at the rendered aperture; lip ellipse at the rendered
    openness), without anti-aliasing.  Used by the canonical-space alignment
    visualization.
    """
    f = identity_features(latents.identity_code)
    R = latents.pose.rotation.detach().cpu().numpy()
    T = latents.pose.translation.detach().cpu().numpy()
    aperture, mouth_open = latents.expression_scalars[0], latents.expression_scalars[1]

    hx, hy = part_local_coords(size, R, T, _Z_HEAD)
    face = ((hx / f["head_rx"]) ** 2 + (hy / f["head_ry"]) ** 2 <= 1.0).astype(np.float64)

    ex, ey = part_local_coords(size, R, T, _Z_EYE)
    scl_ry = max(0.8 * f["eye_r"] * aperture, 0.015)
    eyes = np.zeros((size, size))
    for sx in (-1.0, 1.0):
        rho2 = ((ex - sx * f["eye_dx"]) / f["eye_r"]) ** 2 + ((ey - f["eye_y"]) / scl_ry) ** 2
        eyes = np.maximum(eyes, (rho2 <= 1.0).astype(np.float64))

    mx, my = part_local_coords(size, R, T, _Z_MOUTH)
    drop = 0.12 * mouth_open
    mouth_cy = f["mouth_y"] + 0.5 * drop
    mouth_ry = 0.018 + 0.5 * drop
    mouth = (
        ((mx / f["mouth_w"]) ** 2 + ((my - mouth_cy) / mouth_ry) ** 2 <= 1.0)
    ).astype(np.float64)

    return np.stack([face, eyes, mouth])


def mouth_to_audio(mouth_open: np.ndarray) -> np.ndarray:
    """Exact affine embedding of a mouth-open sequence into audio-latent space.

    Inverse of :func:`audio_mouth_readout`; synced clips carry exactly this.
    """
    m = np.asarray(mouth_open, dtype=np.float64).reshape(-1)
    return m[:, None] * _AUDIO_U[None, :] + _AUDIO_C[None, :]


def make_clip(
    identity: np.ndarray,
    trajectory: list[tuple[MotionParams, np.ndarray]],
    synced_audio: bool,
    size: int = 64,
    seed: int = 0,
) -> Clip:
    """Render a clip along a trajectory of (motion, expression scalars) pairs.

    Only rotation and translation are read from each MotionParams entry; the
    expression rows are re-derived from the scalars so frames and keypoints
    stay consistent.  Synced audio latents are an exact affine image of the
    mouth-open sequence; unsynced audio is seeded Gaussian noise.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory must be nonempty")
    frames = []
    lat_list = []
    mouth = np.zeros(len(trajectory))
    for t, (motion, scalars) in enumerate(trajectory):
        lat = make_scene_latents(identity, motion.rotation, motion.translation, scalars, seed=seed + t)
        img, _ = render_face(lat, size)
        frames.append(img)
        lat_list.append(lat)
        mouth[t] = lat.expression_scalars[1]
    if synced_audio:
        audio = mouth_to_audio(mouth)
    else:
        rng = np.random.default_rng(1009 * seed + 77)
        audio = rng.standard_normal((len(trajectory), AUDIO_DIM))
    return Clip(frames=frames, latents_per_frame=lat_list, audio_latents=audio)


def sample_identity(rng: np.random.Generator, dim: int = ID_DIM) -> np.ndarray:
    """Random unit identity code."""
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def sample_expression_scalars(rng: np.random.Generator) -> np.ndarray:
    """Random (eye_aperture, mouth_open, gaze_yaw, gaze_pitch)."""
    return np.array(
        [
            rng.uniform(0.15, 1.0),
            rng.uniform(0.0, 1.0),
            rng.uniform(-0.45, 0.45),
            rng.uniform(-0.45, 0.45),
        ]
    )


def sample_pose_angles(rng: np.random.Generator) -> tuple[float, float, float]:
    """Random (roll, pitch, yaw) within the desk-world pose range."""
    return (
        float(rng.uniform(-0.35, 0.35)),
        float(rng.uniform(-0.45, 0.45)),
        float(rng.uniform(-0.45, 0.45)),
    )


def sample_latents(rng: np.random.Generator, identity: np.ndarray | None = None, seed: int = 0) -> SceneLatents:
    """Random scene latents (optionally with a fixed identity)."""
    if identity is None:
        identity = sample_identity(rng)
    roll, pitch, yaw = sample_pose_angles(rng)
    rotation = euler_to_matrix(roll, pitch, yaw)
    translation = torch.tensor(
        [rng.uniform(-0.22, 0.22), rng.uniform(-0.22, 0.22), rng.uniform(-0.15, 0.15)],
        dtype=DTYPE,
    )
    return make_scene_latents(identity, rotation, translation, sample_expression_scalars(rng), seed=seed)


def smooth_trajectory(rng: np.random.Generator, length: int) -> list[tuple[MotionParams, np.ndarray]]:
    """Smooth sinusoidal pose/expression paths for benchmark clips."""
    if length < 1:
        raise ValueError("length must be >= 1")
    t = np.arange(length) / max(length, 2)
    def wave(amp, freq_max=2):
        freq = rng.integers(1, freq_max + 1)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        return amp * np.sin(2.0 * np.pi * freq * t + phase)
    roll = wave(rng.uniform(0.1, 0.3))
    pitch = wave(rng.uniform(0.15, 0.4))
    yaw = wave(rng.uniform(0.15, 0.4))
    tx = wave(rng.uniform(0.05, 0.18))
    ty = wave(rng.uniform(0.05, 0.18))
    tz = wave(rng.uniform(0.03, 0.12))
    ap = np.clip(0.55 + wave(0.35), 0.05, 1.0)
    mo = np.clip(0.5 + wave(0.5), 0.0, 1.0)
    gy = np.clip(wave(0.35), -0.45, 0.45)
    gp = np.clip(wave(0.35), -0.45, 0.45)
    out = []
    for i in range(length):
        scalars = np.array([ap[i], mo[i], gy[i], gp[i]])
        motion = MotionParams(
            rotation=euler_to_matrix(roll[i], pitch[i], yaw[i]),
            expression=expression_from_scalars(scalars),
            translation=torch.tensor([tx[i], ty[i], tz[i]], dtype=DTYPE),
        )
        out.append((motion, scalars))
    return out


def save_clip(clip: Clip, directory) -> None:
    """Persist a clip as numbered 16-bit PNG frames plus a JSON metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        u16 = np.round(np.clip(frame, 0.0, 1.0) * 65535.0).astype(np.uint16)
        ok = cv2.imwrite(str(directory / f"frame_{i:04d}.png"), cv2.cvtColor(u16, cv2.COLOR_RGB2BGR))
        if not ok:
            raise IOError(f"failed to write frame {i} under {directory}")
    meta = {
        "size": int(clip.frames[0].shape[0]),
        "n_frames": len(clip.frames),
        "audio_latents": clip.audio_latents.tolist(),
        "latents": None
        if clip.latents_per_frame is None
        else [
            {
                "identity_code": lat.identity_code.tolist(),
                "rotation": lat.pose.rotation.tolist(),
                "translation": lat.pose.translation.tolist(),
                "expression_scalars": lat.expression_scalars.tolist(),
                "seed": int(lat.seed),
            }
            for lat in clip.latents_per_frame
        ],
    }
    (directory / "metadata.json").write_text(json.dumps(meta))


def load_clip(directory) -> Clip:
    """Load a clip saved by :func:`save_clip`."""
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text())
    n_frames = int(meta.get("n_frames", len(meta["latents"] or [])))
    frames = []
    for i in range(n_frames):
        path = directory / f"frame_{i:04d}.png"
        bgr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if bgr is None:
            raise IOError(f"missing frame file {path}")
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 65535.0)
    if meta["latents"] is None:
        lat_list = None
    else:
        lat_list = [
            SceneLatents(
                identity_code=np.array(m["identity_code"]),
                pose=MotionParams(
                    rotation=torch.tensor(m["rotation"], dtype=DTYPE),
                    expression=expression_from_scalars(np.array(m["expression_scalars"])),
                    translation=torch.tensor(m["translation"], dtype=DTYPE),
                ),
                expression_scalars=np.array(m["expression_scalars"]),
                seed=int(m["seed"]),
            )
            for m in meta["latents"]
        ]
    return Clip(frames=frames, latents_per_frame=lat_list, audio_latents=np.array(meta["audio_latents"]))
