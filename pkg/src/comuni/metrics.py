"""Image and clip quality metrics: PSNR, SSIM, and a proxy Fréchet distance.

The proxy video distance replaces a pretrained-feature FVD with a Fréchet
distance over handcrafted per-clip statistics.  The feature layout is frozen
and versioned (:data:`FEATURE_VERSION`) so scores stay comparable across runs.
All metric math runs in float64 regardless of model precision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage

from .errors import ShapeError

FEATURE_VERSION = "cufvd-v1"
PSNR_CAP_DB = 99.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_RIDGE = 1e-6


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for arrays with values in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on the interior region whose windows fit entirely
    inside the frame, then averaged over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects HxW or HxWxC frames, got {a.shape}")
    radius = (_SSIM_WIN - 1) // 2
    if min(a.shape[0], a.shape[1]) < _SSIM_WIN:
        raise ShapeError(f"frame {a.shape} smaller than the {_SSIM_WIN}px window")
    kernel = _gaussian_kernel_1d(_SSIM_SIGMA, radius)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _local_mean(x, kernel)
        my = _local_mean(y, kernel)
        mxx = _local_mean(x * x, kernel)
        myy = _local_mean(y * y, kernel)
        mxy = _local_mean(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        scores.append(float(np.mean(s[radius:-radius, radius:-radius])))
    return float(np.mean(scores))


# -- proxy Frechet video distance -------------------------------------------

def _avg_pool(frames: np.ndarray, factor: int) -> np.ndarray:
    t, h, w, c = frames.shape
    return frames.reshape(t, h // factor, factor, w // factor, factor, c).mean(
        axis=(2, 4)
    )


def _upsample_nearest(frames: np.ndarray, factor: int) -> np.ndarray:
    return frames.repeat(factor, axis=1).repeat(factor, axis=2)


def clip_features(frames: np.ndarray) -> np.ndarray:
    """Fixed per-clip statistics vector (version ``cufvd-v1``).

    Layout: per-frame per-channel spatial mean and std (2*T*C), mean absolute
    inter-frame difference per channel (C), and two Laplacian-pyramid band
    energies per channel (2*C).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ShapeError(f"expected (T,H,W,C) frames, got {frames.shape}")
    t, h, w, c = frames.shape
    if h % 4 or w % 4:
        raise ShapeError("frame size must be divisible by 4 for pyramid energy")
    parts = [
        frames.mean(axis=(1, 2)).ravel(),
        frames.std(axis=(1, 2)).ravel(),
    ]
    if t > 1:
        diffs = np.abs(np.diff(frames, axis=0)).mean(axis=(0, 1, 2))
    else:
        diffs = np.zeros(c)
    parts.append(diffs)
    level1 = _avg_pool(frames, 2)
    level2 = _avg_pool(level1, 2)
    band1 = frames - _upsample_nearest(level1, 2)
    band2 = level1 - _upsample_nearest(level2, 2)
    parts.append((band1 ** 2).mean(axis=(0, 1, 2)))
    parts.append((band2 ** 2).mean(axis=(0, 1, 2)))
    return np.concatenate(parts)


def _gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / max(1, features.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + _RIDGE * np.eye(cov.shape[0])
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    diff = mu1 - mu2
    sqrt_prod, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    if np.iscomplexobj(sqrt_prod):
        sqrt_prod = sqrt_prod.real
    val = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(sqrt_prod)
    return float(max(val, 0.0))


def proxy_fvd(real_clips, generated_clips) -> float:
    """Frechet distance between Gaussian fits of clip feature sets."""
    real = [c.frames if hasattr(c, "frames") else np.asarray(c) for c in real_clips]
    gen = [c.frames if hasattr(c, "frames") else np.asarray(c) for c in generated_clips]
    if len(real) < 2 or len(gen) < 2:
        raise ShapeError("proxy_fvd needs at least 2 clips per set")
    feats_real = np.stack([clip_features(f) for f in real])
    feats_gen = np.stack([clip_features(f) for f in gen])
    if feats_real.shape[1] != feats_gen.shape[1]:
        raise ShapeError("feature dimensions differ; clip lengths must match")
    return frechet_distance(*_gaussian_fit(feats_real), *_gaussian_fit(feats_gen))


# -- report ------------------------------------------------------------------

@dataclass
class MetricReport:
    config_hash: str
    per_clip_psnr: list[float] = field(default_factory=list)
    per_clip_ssim: list[float] = field(default_factory=list)
    proxy_fvd_score: float | None = None
    sample_count: int = 0
    feature_version: str = FEATURE_VERSION

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("row,clip,psnr_db,ssim,proxy_fvd,samples,config_hash,features\n")
        for i, (p, s) in enumerate(zip(self.per_clip_psnr, self.per_clip_ssim)):
            buf.write(f"clip,{i},{p:.6f},{s:.6f},,,,\n")
        fvd = "" if self.proxy_fvd_score is None else f"{self.proxy_fvd_score:.6f}"
        mean_p = np.mean(self.per_clip_psnr) if self.per_clip_psnr else float("nan")
        mean_s = np.mean(self.per_clip_ssim) if self.per_clip_ssim else float("nan")
        buf.write(
            f"summary,,{mean_p:.6f},{mean_s:.6f},{fvd},{self.sample_count},"
            f"{self.config_hash},{self.feature_version}\n"
        )
        return buf.getvalue()


def reconstruction_report(real_clips, recon_clips, config_hash: str,
                          with_fvd: bool = True) -> MetricReport:
    report = MetricReport(config_hash=config_hash, sample_count=len(real_clips))
    for real, recon in zip(real_clips, recon_clips):
        a = real.frames if hasattr(real, "frames") else np.asarray(real)
        b = recon.frames if hasattr(recon, "frames") else np.asarray(recon)
        report.per_clip_psnr.append(psnr(a, b))
        report.per_clip_ssim.append(float(np.mean([ssim(a[t], b[t])
                                                   for t in range(a.shape[0])])))
    if with_fvd and len(real_clips) >= 2:
        report.proxy_fvd_score = proxy_fvd(real_clips, recon_clips)
    return report
