"""Parametric toy faces standing in for detected, aligned face crops.

Identity lives in colours and face geometry; expression is a controlled
deformation of the mouth and brows. Per-frame jitter (shift, gain, sensor
noise, expression intensity) plays the role of in-the-wild variation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# (mouth_curve, mouth_open, brow_tilt, brow_raise)
EXPRESSION_SHAPES: dict[str, tuple[float, float, float, float]] = {
    "happy": (1.0, 0.25, 0.0, 0.1),
    "sad": (-1.0, 0.0, 1.0, 0.0),
    "surprise": (0.0, 1.0, 0.0, 1.0),
    "angry": (-0.4, 0.0, -1.0, -0.6),
    "neutral": (0.0, 0.0, 0.0, 0.0),
    "disgust": (-0.6, 0.35, -0.5, -0.3),
    "fear": (-0.3, 0.7, 0.8, 0.8),
}


@dataclass(frozen=True)
class Identity:
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    face_rx: float
    face_ry: float
    hairline: float
    eye_y: float
    eye_dx: float
    eye_r: float
    nose_len: float
    mouth_y: float
    mouth_w: float
    # low-frequency skin pattern: rows of (fx, fy, phase, r, g, b amplitude)
    texture: tuple[tuple[float, ...], ...] = ()

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Identity":
        return cls(
            skin=tuple(rng.uniform([0.35, 0.2, 0.15], [0.95, 0.8, 0.7])),
            hair=tuple(rng.uniform(0.0, 0.9, 3)),
            iris=tuple(rng.uniform(0.0, 0.8, 3)),
            face_rx=float(rng.uniform(0.28, 0.42)),
            face_ry=float(rng.uniform(0.36, 0.47)),
            hairline=float(rng.uniform(0.12, 0.32)),
            eye_y=float(rng.uniform(0.38, 0.46)),
            eye_dx=float(rng.uniform(0.11, 0.18)),
            eye_r=float(rng.uniform(0.035, 0.06)),
            nose_len=float(rng.uniform(0.06, 0.14)),
            mouth_y=float(rng.uniform(0.68, 0.74)),
            mouth_w=float(rng.uniform(0.10, 0.16)),
            texture=tuple(
                (*(rng.uniform(1.0, 3.5) * _unit(rng)), rng.uniform(0, 2 * np.pi), *rng.normal(0, 0.035, 3))
                for _ in range(6)
            ),
        )


def _unit(rng: np.random.Generator) -> np.ndarray:
    a = rng.uniform(0, 2 * np.pi)
    return np.array([np.cos(a), np.sin(a)])


def _soft(d: np.ndarray, width: float) -> np.ndarray:
    # d < 0 inside the shape
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    img *= 1.0 - mask[..., None]
    img += mask[..., None] * np.asarray(color, dtype=np.float64)


def render_face(
    ident: Identity,
    expression: str,
    size: int,
    rng: np.random.Generator | None = None,
    intensity: float = 1.0,
    jitter: bool = True,
    background: tuple[float, float, float] | np.ndarray = (0.5, 0.5, 0.5),
) -> np.ndarray:
    """Render one ``size`` x ``size`` RGB uint8 crop."""
    curve, mouth_open, tilt, raise_ = (intensity * v for v in EXPRESSION_SHAPES[expression])
    if rng is not None and jitter:
        dx, dy = rng.uniform(-0.04, 0.04, 2)
        gain = rng.uniform(0.9, 1.1)
        noise = rng.normal(0.0, 3.0 / 255.0, (size, size, 3))
    else:
        dx = dy = 0.0
        gain = 1.0
        noise = 0.0

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    x = (xs + 0.5) / size - 0.5 - dx
    y = (ys + 0.5) / size - dy
    px = 1.0 / size

    img = np.empty((size, size, 3))
    img[:] = background

    face_d = np.sqrt((x / ident.face_rx) ** 2 + ((y - 0.52) / ident.face_ry) ** 2) - 1.0
    face = _soft(face_d * ident.face_rx, 0.6 * px)
    _paint(img, face, ident.skin)
    if ident.texture:
        pattern = np.zeros((size, size, 3))
        for fx, fy, ph, *amp in ident.texture:
            wave = np.cos(2 * np.pi * (fx * x + fy * y) + ph)
            pattern += wave[..., None] * np.asarray(amp)
        img += face[..., None] * pattern

    hair = face * _soft(y - ident.hairline, 0.6 * px)
    _paint(img, hair, ident.hair)

    for side in (-1.0, 1.0):
        ex = side * ident.eye_dx
        eye_d = np.sqrt((x - ex) ** 2 + (y - ident.eye_y) ** 2) - ident.eye_r
        _paint(img, _soft(eye_d, 0.5 * px), (0.97, 0.97, 0.97))
        iris_d = np.sqrt((x - ex) ** 2 + (y - ident.eye_y) ** 2) - 0.6 * ident.eye_r
        _paint(img, _soft(iris_d, 0.5 * px), ident.iris)

        # brow: inner end moves up with positive tilt
        by0 = ident.eye_y - 2.2 * ident.eye_r - 0.035 * raise_
        t = np.clip((x - ex) * side / 0.07, -1.0, 1.0)
        brow_y = by0 - 0.03 * tilt * (-t) * 0.5
        brow_d = np.maximum(np.abs(y - brow_y) - 0.012, np.abs((x - ex) * side) - 0.07)
        _paint(img, _soft(brow_d, 0.5 * px), np.asarray(ident.hair) * 0.6)

    nose_d = np.maximum(np.abs(x) - 0.015, np.abs(y - (0.52 + ident.nose_len / 2)) - ident.nose_len / 2)
    _paint(img, 0.5 * _soft(nose_d, 0.5 * px), np.asarray(ident.skin) * 0.7)

    # mouth: parabola whose ends rise for positive curve, plus an opening
    u = x / ident.mouth_w
    lip_y = ident.mouth_y - 0.07 * curve * (u ** 2 - 0.5)
    in_span = np.abs(u) - 1.0
    lip_d = np.maximum(np.abs(y - lip_y) - 0.014, in_span * ident.mouth_w)
    _paint(img, _soft(lip_d, 0.5 * px), (0.65, 0.12, 0.15))
    if mouth_open > 0.05:
        open_d = np.sqrt((x / (0.8 * ident.mouth_w)) ** 2 + ((y - ident.mouth_y) / (0.07 * mouth_open)) ** 2) - 1.0
        _paint(img, _soft(open_d * 0.05, 0.5 * px), (0.15, 0.02, 0.04))

    img = np.clip(img * gain + noise, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


@dataclass
class ToyVideo:
    video_id: str
    expression: str
    identities: list[Identity]
    background: tuple[float, float, float]
    frames: list[list[np.ndarray]] = field(default_factory=list)  # [frame][person] crops


def make_videos(
    n_videos: int,
    expressions: list[str],
    frames_per_video: int,
    size: int,
    rng: np.random.Generator,
    two_person_prob: float = 0.3,
    prefix: str = "v",
) -> list[ToyVideo]:
    """Videos with one or two people, each identity unique to its video.

    Expression labels are assigned round-robin so classes stay balanced.
    """
    videos = []
    for i in range(n_videos):
        expr = expressions[i % len(expressions)]
        n_people = 2 if rng.random() < two_person_prob else 1
        people = [Identity.sample(rng) for _ in range(n_people)]
        bg = tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))
        vid = ToyVideo(f"{prefix}{i:04d}", expr, people, bg)
        for _ in range(frames_per_video):
            vid.frames.append([
                render_face(p, expr, size, rng, intensity=rng.uniform(0.6, 1.0), background=bg)
                for p in people
            ])
        videos.append(vid)
    return videos


def make_labelled_pool(
    n_identities: int,
    per_identity: int,
    expressions: list[str],
    size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images with identity and expression labels, for pretraining toy models.

    Returns ``(images uint8 (N,H,W,3), identity ids, expression indices)``.
    """
    imgs, ids, exprs = [], [], []
    for k in range(n_identities):
        ident = Identity.sample(rng)
        for _ in range(per_identity):
            e = int(rng.integers(len(expressions)))
            bg = rng.uniform(0.05, 0.95, 3)
            imgs.append(render_face(ident, expressions[e], size, rng, rng.uniform(0.6, 1.0), background=bg))
            ids.append(k)
            exprs.append(e)
    return np.stack(imgs), np.asarray(ids), np.asarray(exprs)
