"""Synthetic multi-camera pedestrian videos with occlusions.

Each identity is a figure made of four horizontal body bands (head, torso,
hips, legs).  Every band has an identity-specific colour and stripe texture.
Cameras change illumination and background; figures drift a few pixels
between frames; occluder bars overwrite a horizontal band in a random subset
of frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.65, 0.20], [0.20, 0.30, 0.85], [0.90, 0.80, 0.15],
    [0.60, 0.20, 0.70], [0.95, 0.55, 0.10], [0.10, 0.70, 0.75], [0.85, 0.85, 0.85],
    [0.15, 0.15, 0.15], [0.55, 0.35, 0.20],
])
# (top, bottom) as fractions of figure height
BANDS = ((0.0, 0.16), (0.16, 0.48), (0.48, 0.70), (0.70, 1.0))
TEXTURES = ("solid", "hstripe", "vstripe", "check")


@dataclass
class Video:
    key: str
    identity: int
    camera: int
    frames: np.ndarray                 # (T, 3, H, W) float32 in [0, 1]
    occluded: np.ndarray               # (T,) bool


@dataclass
class SyntheticDataset:
    videos: list[Video]
    train_ids: list[int]
    test_ids: list[int]
    params: dict = field(default_factory=dict)

    def by_key(self) -> dict[str, Video]:
        return {v.key: v for v in self.videos}

    def videos_of(self, ids) -> list[Video]:
        ids = set(ids)
        return [v for v in self.videos if v.identity in ids]

    @property
    def num_frames(self) -> int:
        return sum(len(v.frames) for v in self.videos)


def identity_appearance(identity: int, seed: int) -> dict:
    """Band colours, textures and stripe periods; a pure function of (identity, seed)."""
    rng = np.random.default_rng([seed, 7919, identity])
    colors = rng.choice(len(PALETTE), size=len(BANDS), replace=True)
    textures = rng.choice(len(TEXTURES), size=len(BANDS))
    periods = rng.integers(2, 5, size=len(BANDS))
    width = float(rng.uniform(0.42, 0.58))
    return {"colors": colors, "textures": textures, "periods": periods, "width": width}


def _render(look: dict, height: int, width: int, dy: int, dx: int,
            gain: np.ndarray, background: np.ndarray, rng: np.random.Generator,
            noise: float) -> np.ndarray:
    img = np.empty((3, height, width))
    img[:] = background[:, None, None]
    img += rng.normal(0.0, noise, size=img.shape)
    top, bottom = int(0.06 * height) + dy, int(0.96 * height) + dy
    fig_h = bottom - top
    fig_w = int(look["width"] * width)
    left = (width - fig_w) // 2 + dx
    yy, xx = np.mgrid[0:height, 0:width]
    for b, (f0, f1) in enumerate(BANDS):
        y0, y1 = top + int(f0 * fig_h), top + int(f1 * fig_h)
        w_band = fig_w if b else max(fig_w // 2, 2)
        x0 = left + (fig_w - w_band) // 2
        mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x0 + w_band)
        base = PALETTE[look["colors"][b]]
        p = look["periods"][b]
        kind = TEXTURES[look["textures"][b]]
        if kind == "hstripe":
            shade = ((yy - y0) // p) % 2
        elif kind == "vstripe":
            shade = ((xx - x0) // p) % 2
        elif kind == "check":
            shade = (((yy - y0) // p) + ((xx - x0) // p)) % 2
        else:
            shade = np.zeros_like(yy)
        tex = np.where(shade, 0.55, 1.0)
        for c in range(3):
            img[c][mask] = (base[c] * tex)[mask] + rng.normal(0.0, noise, size=mask.sum())
    img *= gain[:, None, None]
    return img


def generate_dataset(C: int, clips_per_id: int, T: int, seed: int, *,
                     n_train: int | None = None, frame_size: tuple[int, int] = (64, 32),
                     occlusion_rate: float = 0.3, noise: float = 0.05,
                     jitter: int = 2) -> SyntheticDataset:
    """Deterministic dataset of ``C * clips_per_id`` videos with ``T`` frames each.

    Clip ``j`` of an identity is recorded by camera ``j``.  The first
    ``n_train`` identities (default: two thirds) form the training split and
    the rest the test split.
    """
    if C < 2:
        raise ValueError(f"need at least 2 identities, got {C}")
    if clips_per_id < 1 or T < 1:
        raise ValueError("clips_per_id and T must be positive")
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ValueError(f"occlusion_rate {occlusion_rate} outside [0, 1]")
    if n_train is None:
        n_train = max(1, (2 * C) // 3)
    if not 1 <= n_train < C:
        raise ValueError(f"n_train={n_train} must leave at least one test identity of {C}")
    h, w = frame_size
    cam_rng = np.random.default_rng([seed, 104729])
    gains = cam_rng.uniform(0.75, 1.25, size=(clips_per_id, 3))
    backgrounds = cam_rng.uniform(0.2, 0.6, size=(clips_per_id, 3))

    videos = []
    for ident in range(C):
        look = identity_appearance(ident, seed)
        for cam in range(clips_per_id):
            rng = np.random.default_rng([seed, ident, cam])
            frames = np.empty((T, 3, h, w), dtype=np.float32)
            occluded = rng.random(T) < occlusion_rate
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            for t in range(T):
                dy = int(np.clip(dy + rng.integers(-1, 2), -jitter, jitter))
                dx = int(np.clip(dx + rng.integers(-1, 2), -jitter, jitter))
                img = _render(look, h, w, dy, dx, gains[cam], backgrounds[cam], rng, noise)
                if occluded[t]:
                    bar = int(rng.integers(h // 8, h // 2 + 1))
                    y0 = int(rng.integers(0, h - bar + 1))
                    img[:, y0:y0 + bar, :] = rng.uniform(0.0, 1.0, size=(3, 1, 1))
                frames[t] = np.clip(img, 0.0, 1.0)
            videos.append(Video(f"id{ident:04d}_c{cam}", ident, cam, frames, occluded))
    params = dict(C=C, clips_per_id=clips_per_id, T=T, seed=seed, n_train=n_train,
                  frame_size=list(frame_size), occlusion_rate=occlusion_rate,
                  noise=noise, jitter=jitter)
    return SyntheticDataset(videos, list(range(n_train)), list(range(n_train, C)), params)
