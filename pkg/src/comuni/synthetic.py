"""Synthetic moving-sprite clips with known common/unique structure.

Each clip has a per-video constant background (base color plus a static
low-frequency texture) and a single flat-colored square sprite following a
deterministic integer trajectory with reflection at the frame borders.  The
background is the common signal; the sprite position is the unique signal.
Trajectories are exactly reproducible from the stored parameters, which is
what makes decomposition claims testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import VideoClip
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticSceneParams:
    background: tuple[float, float, float]
    sprite_size: int
    sprite_color: tuple[float, float, float]
    start: tuple[int, int]          # top-left corner (row, col) at t=0
    velocity: tuple[int, int]       # pixels per frame (row, col)
    noise_level: float = 0.08       # amplitude of the static background texture
    texture_seed: int = 0

    def to_line(self) -> str:
        bg = ",".join(f"{v:.6f}" for v in self.background)
        sc = ",".join(f"{v:.6f}" for v in self.sprite_color)
        return (
            f"bg={bg} size={self.sprite_size} color={sc} "
            f"start={self.start[0]},{self.start[1]} "
            f"vel={self.velocity[0]},{self.velocity[1]} "
            f"noise={self.noise_level:.6f} tex={self.texture_seed}"
        )

    @classmethod
    def from_line(cls, line: str) -> "SyntheticSceneParams":
        kv = dict(part.split("=", 1) for part in line.split())
        bg = tuple(float(v) for v in kv["bg"].split(","))
        color = tuple(float(v) for v in kv["color"].split(","))
        start = tuple(int(v) for v in kv["start"].split(","))
        vel = tuple(int(v) for v in kv["vel"].split(","))
        return cls(
            background=bg,
            sprite_size=int(kv["size"]),
            sprite_color=color,
            start=start,
            velocity=vel,
            noise_level=float(kv["noise"]),
            texture_seed=int(kv["tex"]),
        )


def sprite_trajectory(params: SyntheticSceneParams, frames: int, height: int,
                      width: int) -> np.ndarray:
    """Ground-truth top-left positions, shape (frames, 2), reflecting at borders."""
    size = params.sprite_size
    max_r, max_c = height - size, width - size
    if max_r < 0 or max_c < 0:
        raise ConfigError(f"sprite of size {size} does not fit in {height}x{width}")
    pos = np.empty((frames, 2), dtype=np.int64)
    r, c = params.start
    vr, vc = params.velocity
    if not (0 <= r <= max_r and 0 <= c <= max_c):
        raise ConfigError(f"sprite start {params.start} out of bounds")
    for t in range(frames):
        pos[t] = (r, c)
        r += vr
        c += vc
        while not 0 <= r <= max_r:
            r = -r if r < 0 else 2 * max_r - r
            vr = -vr
        while not 0 <= c <= max_c:
            c = -c if c < 0 else 2 * max_c - c
            vc = -vc
    return pos


def _background_texture(rng: np.random.Generator, height: int, width: int,
                        amplitude: float) -> np.ndarray:
    """Static smooth zero-mean texture: low-res noise, bilinearly upsampled."""
    if amplitude == 0.0:
        return np.zeros((height, width, 3), dtype=np.float32)
    coarse = rng.uniform(-1.0, 1.0, size=(8, 8, 3)).astype(np.float32)
    coarse -= coarse.mean(axis=(0, 1), keepdims=True)
    ys = np.linspace(0, 7, height, dtype=np.float32)
    xs = np.linspace(0, 7, width, dtype=np.float32)
    y0 = np.clip(ys.astype(int), 0, 6)
    x0 = np.clip(xs.astype(int), 0, 6)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    tex = (c00 * (1 - wy) * (1 - wx) + c01 * (1 - wy) * wx
           + c10 * wy * (1 - wx) + c11 * wy * wx)
    return (amplitude * tex).astype(np.float32)


def render_clip(params: SyntheticSceneParams, frames: int, height: int,
                width: int, fps: int | None = None) -> VideoClip:
    """Render the clip described by ``params``; deterministic."""
    traj = sprite_trajectory(params, frames, height, width)
    tex_rng = np.random.default_rng(params.texture_seed)
    base = np.asarray(params.background, dtype=np.float32)
    bg = base[None, None, :] + _background_texture(tex_rng, height, width,
                                                   params.noise_level)
    bg = np.clip(bg, 0.0, 1.0)
    out = np.empty((frames, height, width, 3), dtype=np.float32)
    color = np.asarray(params.sprite_color, dtype=np.float32)
    s = params.sprite_size
    for t in range(frames):
        out[t] = bg
        r, c = traj[t]
        out[t, r:r + s, c:c + s, :] = color
    return VideoClip(frames=out, fps=fps)


def swept_region_mask(params: SyntheticSceneParams, frames: int, height: int,
                      width: int) -> np.ndarray:
    """Boolean (H, W) mask of pixels the sprite covers in any frame."""
    traj = sprite_trajectory(params, frames, height, width)
    mask = np.zeros((height, width), dtype=bool)
    s = params.sprite_size
    for r, c in traj:
        mask[r:r + s, c:c + s] = True
    return mask


def sample_scene_params(rng: np.random.Generator, height: int, width: int,
                        noise_level: float = 0.08,
                        allow_static: bool = False) -> SyntheticSceneParams:
    background = tuple(rng.uniform(0.05, 0.95, size=3).round(6))
    # sprite color kept visibly distinct from the background
    while True:
        color = tuple(rng.uniform(0.0, 1.0, size=3).round(6))
        if np.linalg.norm(np.subtract(color, background)) >= 0.4:
            break
    size = int(rng.integers(8, 17))
    start = (int(rng.integers(0, height - size + 1)),
             int(rng.integers(0, width - size + 1)))
    speeds = [-3, -2, -1, 1, 2, 3]
    if allow_static:
        speeds.append(0)
    velocity = (int(rng.choice(speeds)), int(rng.choice(speeds)))
    return SyntheticSceneParams(
        background=background,
        sprite_size=size,
        sprite_color=color,
        start=start,
        velocity=velocity,
        noise_level=noise_level,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def generate_synthetic_dataset(n: int, frames: int, resolution: int, seed: int,
                               noise_level: float = 0.08,
                               fps: int | None = None,
                               ) -> list[tuple[VideoClip, SyntheticSceneParams]]:
    """Deterministic dataset of ``n`` (clip, params) pairs for one seed."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        params = sample_scene_params(rng, resolution, resolution, noise_level)
        out.append((render_clip(params, frames, resolution, resolution, fps), params))
    return out
