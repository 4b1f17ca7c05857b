"""Stage I: decompose clips into one common latent plus per-frame unique
latents, recompose through a cascading multi-resolution merge, and decode
frames with a time-agnostic decoder.

Public encode/decode methods speak numpy in the (H, W, D) layout; the torch
modules underneath use channels-first tensors.  Sampled latents are used for
training, means at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .clips import VideoClip
from .config import RunConfig
from .errors import ShapeError, TrainingDivergenceError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


# -- latent containers -------------------------------------------------------

@dataclass
class CommonLatent:
    mean: np.ndarray      # (H/f_c, W/f_c, D)
    logvar: np.ndarray
    sample: np.ndarray

    @classmethod
    def from_value(cls, value: np.ndarray) -> "CommonLatent":
        value = np.asarray(value, dtype=np.float32)
        return cls(mean=value, logvar=np.full_like(value, LOGVAR_MIN), sample=value)


@dataclass
class UniqueLatentSeq:
    mean: np.ndarray      # (T, H/f_u, W/f_u, D)
    logvar: np.ndarray
    sample: np.ndarray

    @classmethod
    def from_value(cls, value: np.ndarray) -> "UniqueLatentSeq":
        value = np.asarray(value, dtype=np.float32)
        return cls(mean=value, logvar=np.full_like(value, LOGVAR_MIN), sample=value)

    @property
    def num_frames(self) -> int:
        return self.mean.shape[0]


@dataclass
class LatentBundle:
    common: CommonLatent
    unique: UniqueLatentSeq
    config_hash: str

    def element_counts(self) -> tuple[int, int]:
        return self.common.mean.size, self.unique.mean.size


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
    eta = torch.randn(mean.shape, generator=generator, dtype=mean.dtype,
                      device=mean.device)
    return mean + torch.exp(0.5 * logvar) * eta


def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mean, e^logvar) || N(0, 1)), summed over all but batch."""
    logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
    per_elem = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    return per_elem.flatten(1).sum(dim=1) if per_elem.ndim > 1 else per_elem.sum()


# -- building blocks ----------------------------------------------------------

def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(max(groups, 1), channels)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DownStage(nn.Module):
    """Stride-2 conv plus one refining conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.silu(self.conv(F.silu(self.down(x))))


class TemporalAttention(nn.Module):
    """Softmax attention across frames, independently at every spatial site."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.scale = channels ** -0.5

    def forward(self, x: torch.Tensor, frames: int, return_weights: bool = False):
        """x: (B*T, C, H, W) with the frame axis folded into the batch."""
        bt, c, h, w = x.shape
        if bt % frames:
            raise ShapeError(f"batch {bt} not divisible by frame count {frames}")
        b = bt // frames
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)

        def to_tokens(t):
            # (B*T, C, H, W) -> (B*H*W, T, C)
            t = t.reshape(b, frames, c, h, w).permute(0, 3, 4, 1, 2)
            return t.reshape(b * h * w, frames, c)

        qt, kt, vt = to_tokens(q), to_tokens(k), to_tokens(v)
        attn = torch.softmax(qt @ kt.transpose(1, 2) * self.scale, dim=-1)
        out = attn @ vt
        out = out.reshape(b, h, w, frames, c).permute(0, 3, 4, 1, 2)
        out = out.reshape(bt, c, h, w)
        out = x + self.proj(out)
        if return_weights:
            return out, attn.reshape(b, h, w, frames, frames)
        return out


class CommonEncoder(nn.Module):
    """Per-frame features at the f_c scale, channel-concatenated over time and
    reduced to one spatial map by a learned 1x1 map (fixed to the configured T)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        h = cfg.vae_hidden
        self.frames = cfg.frames
        self.stem = nn.Conv2d(3, h, 3, padding=1)
        self.stages = nn.ModuleList(
            DownStage(h) for _ in range(int(math.log2(cfg.f_c)))
        )
        self.reduce = nn.Conv2d(cfg.frames * h, h, 1)
        self.res = nn.Sequential(*[ResBlock(h) for _ in range(cfg.vae_res_layers)])
        self.head = nn.Conv2d(h, 2 * cfg.latent_dim, 3, padding=1)

    def forward(self, frames_bt: torch.Tensor, batch: int):
        """frames_bt: (B*T, 3, H, W) -> (mean, logvar) each (B, D, h, w)."""
        if frames_bt.shape[0] != batch * self.frames:
            raise ShapeError(
                f"commonness reducer is fixed to T={self.frames}; got "
                f"{frames_bt.shape[0] // max(batch, 1)} frames"
            )
        x = F.silu(self.stem(frames_bt))
        for stage in self.stages:
            x = stage(x)
        bt, c, hh, ww = x.shape
        x = x.reshape(batch, self.frames * c, hh, ww)
        x = F.silu(self.reduce(x))
        x = self.res(x)
        mean, logvar = self.head(x).chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class UniqueEncoder(nn.Module):
    """Per-frame features at the f_u scale, de-duplicated by temporal attention."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        h = cfg.vae_hidden
        self.stem = nn.Conv2d(3, h, 3, padding=1)
        self.stages = nn.ModuleList(
            DownStage(h) for _ in range(int(math.log2(cfg.f_u)))
        )
        self.temporal = TemporalAttention(h)
        self.res = nn.Sequential(*[ResBlock(h) for _ in range(cfg.vae_res_layers)])
        self.head = nn.Conv2d(h, 2 * cfg.latent_dim, 3, padding=1)

    def forward(self, frames_bt: torch.Tensor, frames: int):
        if frames < 1:
            raise ShapeError("cannot encode a clip with zero frames")
        x = F.silu(self.stem(frames_bt))
        for stage in self.stages:
            x = stage(x)
        x = self.temporal(x, frames)
        x = self.res(x)
        mean, logvar = self.head(x).chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class MergeCascade(nn.Module):
    """Fuse one common latent with one unique latent over a resolution ladder.

    Both latents are resampled to every power-of-two rung between the unique
    and common resolutions; matched pairs are concatenated and transformed,
    then rung outputs are upsampled and summed coarse to fine.
    """

    def __init__(self, cfg: RunConfig, bias: bool = True):
        super().__init__()
        self.common_res = cfg.common_res
        self.unique_res = cfg.unique_res
        self.latent_dim = cfg.latent_dim
        h = cfg.vae_hidden
        self.rungs = []
        r = cfg.unique_res
        while r <= cfg.common_res:
            self.rungs.append(r)
            r *= 2
        self.transforms = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(2 * cfg.latent_dim, h, 3, padding=1, bias=bias),
                nn.SiLU(),
                nn.Conv2d(h, h, 3, padding=1, bias=bias),
            )
            for _ in self.rungs
        )

    def forward(self, common: torch.Tensor, unique: torch.Tensor) -> torch.Tensor:
        """common: (B, D, r_c, r_c); unique: (B, D, r_u, r_u) -> (B, h, r_c, r_c)."""
        if common.shape[1] != unique.shape[1]:
            raise ShapeError(
                f"latent channel mismatch: {common.shape[1]} vs {unique.shape[1]}"
            )
        if common.shape[-1] != self.common_res or unique.shape[-1] != self.unique_res:
            raise ShapeError(
                f"expected common {self.common_res}px / unique {self.unique_res}px, "
                f"got {common.shape[-1]}px / {unique.shape[-1]}px"
            )
        out = None
        for rung, transform in zip(self.rungs, self.transforms):
            c = F.avg_pool2d(common, self.common_res // rung) \
                if rung < self.common_res else common
            u = F.interpolate(unique, scale_factor=rung // self.unique_res,
                              mode="nearest") if rung > self.unique_res else unique
            level = transform(torch.cat([c, u], dim=1))
            out = level if out is None else \
                F.interpolate(out, scale_factor=2, mode="nearest") + level
        return out


class FrameDecoder(nn.Module):
    """Residual layers then log2(f_c) upsampling stages; shared across frames."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        h = cfg.vae_hidden
        self.res = nn.Sequential(*[ResBlock(h) for _ in range(cfg.vae_res_layers)])
        ups = []
        ch = h
        for _ in range(int(math.log2(cfg.f_c))):
            nxt = max(ch // 2, 16)
            ups.append(nn.Conv2d(ch, nxt, 3, padding=1))
            ch = nxt
        self.ups = nn.ModuleList(ups)
        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        x = self.res(fused)
        for conv in self.ups:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.silu(conv(x))
        return self.out_conv(F.silu(self.out_norm(x)))


class PatchDiscriminator(nn.Module):
    """Patch logits over channel-stacked frames of a whole clip."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        d = cfg.disc_hidden
        layers = [nn.Conv2d(cfg.frames * 3, d, 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2)]
        ch = d
        for _ in range(3):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                       _norm(ch * 2), nn.LeakyReLU(0.2)]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, clip_bt: torch.Tensor) -> torch.Tensor:
        """clip_bt: (B, T, 3, H, W) -> patch logits (B, 1, H/16, W/16)."""
        b, t, c, h, w = clip_bt.shape
        return self.net(clip_bt.reshape(b, t * c, h, w))


# -- the full model -----------------------------------------------------------

class CuVae(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.common_encoder = CommonEncoder(cfg)
        self.unique_encoder = UniqueEncoder(cfg)
        self.merge = MergeCascade(cfg)
        self.decoder = FrameDecoder(cfg)

    # ---- tensor helpers ----

    def _check_clip(self, clip: VideoClip) -> torch.Tensor:
        t, h, w, c = clip.shape
        if t != self.cfg.frames:
            raise ShapeError(f"model is fixed to T={self.cfg.frames}, clip has T={t}")
        if h != self.cfg.resolution or w != self.cfg.resolution:
            raise ShapeError(
                f"model expects {self.cfg.resolution}px frames, got {h}x{w}"
            )
        arr = torch.from_numpy(np.ascontiguousarray(clip.frames))
        return arr.permute(0, 3, 1, 2)  # (T, 3, H, W)

    @staticmethod
    def _to_hwc(x: torch.Tensor) -> np.ndarray:
        return x.permute(0, 2, 3, 1).contiguous().cpu().numpy().astype(np.float32)

    # ---- public numpy-facing API (inference) ----

    @torch.no_grad()
    def encode_common(self, clip: VideoClip,
                      generator: torch.Generator | None = None) -> CommonLatent:
        frames = self._check_clip(clip)
        mean, logvar = self.common_encoder(frames, batch=1)
        sample = reparameterize(mean, logvar, generator)
        to_np = lambda v: self._to_hwc(v)[0]
        return CommonLatent(mean=to_np(mean), logvar=to_np(logvar),
                            sample=to_np(sample))

    @torch.no_grad()
    def encode_unique(self, clip: VideoClip,
                      generator: torch.Generator | None = None) -> UniqueLatentSeq:
        frames = self._check_clip(clip)
        mean, logvar = self.unique_encoder(frames, frames=self.cfg.frames)
        sample = reparameterize(mean, logvar, generator)
        return UniqueLatentSeq(mean=self._to_hwc(mean),
                               logvar=self._to_hwc(logvar),
                               sample=self._to_hwc(sample))

    @torch.no_grad()
    def encode_bundle(self, clip: VideoClip,
                      generator: torch.Generator | None = None) -> LatentBundle:
        return LatentBundle(
            common=self.encode_common(clip, generator),
            unique=self.encode_unique(clip, generator),
            config_hash=self.cfg.config_hash(),
        )

    @torch.no_grad()
    def merge_cascade(self, common: np.ndarray, unique_t: np.ndarray) -> np.ndarray:
        """Fuse one common latent (h,w,D) with one frame's unique latent."""
        c = torch.from_numpy(np.asarray(common, dtype=np.float32)).permute(2, 0, 1)
        u = torch.from_numpy(np.asarray(unique_t, dtype=np.float32)).permute(2, 0, 1)
        fused = self.merge(c[None], u[None])
        return self._to_hwc(fused)[0]

    @torch.no_grad()
    def decode_frame(self, fused: np.ndarray) -> np.ndarray:
        """Decode one fused map (r_c, r_c, hidden) to an (H, W, 3) frame."""
        x = torch.from_numpy(np.asarray(fused, dtype=np.float32)).permute(2, 0, 1)
        frame = self.decoder(x[None]).clamp(0.0, 1.0)
        return self._to_hwc(frame)[0]

    @torch.no_grad()
    def decode_bundle(self, bundle: LatentBundle) -> VideoClip:
        """Decode latent values (means) into a clip; one decode per frame."""
        common = torch.from_numpy(bundle.common.mean).permute(2, 0, 1)[None]
        unique = torch.from_numpy(bundle.unique.mean).permute(0, 3, 1, 2)
        t = unique.shape[0]
        fused = self.merge(common.expand(t, -1, -1, -1), unique)
        frames = self.decoder(fused).clamp(0.0, 1.0)
        return VideoClip(frames=self._to_hwc(frames))

    @torch.no_grad()
    def swap_recompose(self, common_from: VideoClip,
                       unique_from: VideoClip) -> VideoClip:
        """Decode donor A's common latent with donor B's unique sequence."""
        common = self.encode_common(common_from).mean
        unique = self.encode_unique(unique_from).mean
        bundle = LatentBundle(
            common=CommonLatent.from_value(common),
            unique=UniqueLatentSeq.from_value(unique),
            config_hash=self.cfg.config_hash(),
        )
        return self.decode_bundle(bundle)

    @torch.no_grad()
    def reconstruct(self, clip: VideoClip) -> VideoClip:
        return self.swap_recompose(clip, clip)

    # ---- training forward (torch, batched, gradients flow) ----

    def training_outputs(self, clips_bt: torch.Tensor,
                         generator: torch.Generator | None = None) -> dict:
        """clips_bt: (B, T, 3, H, W).  Returns sampled latents and the raw
        (unclamped) reconstruction used for loss computation."""
        b, t, c, h, w = clips_bt.shape
        flat = clips_bt.reshape(b * t, c, h, w)
        c_mean, c_logvar = self.common_encoder(flat, batch=b)
        u_mean, u_logvar = self.unique_encoder(flat, frames=t)
        c_sample = reparameterize(c_mean, c_logvar, generator)
        u_sample = reparameterize(u_mean, u_logvar, generator)
        common_rep = c_sample.repeat_interleave(t, dim=0)
        fused = self.merge(common_rep, u_sample)
        recon = self.decoder(fused).reshape(b, t, c, h, w)
        return {
            "recon_raw": recon,
            "common_mean": c_mean, "common_logvar": c_logvar,
            "unique_mean": u_mean.reshape(b, t, *u_mean.shape[1:]),
            "unique_logvar": u_logvar.reshape(b, t, *u_logvar.shape[1:]),
        }


# -- losses -------------------------------------------------------------------

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def _gradient_magnitude(frames: torch.Tensor) -> torch.Tensor:
    """frames: (N, C, H, W) -> per-channel Sobel gradient magnitude."""
    c = frames.shape[1]
    kx = _SOBEL_X.to(frames).expand(c, 1, 3, 3)
    ky = _SOBEL_Y.to(frames).expand(c, 1, 3, 3)
    gx = F.conv2d(frames, kx, padding=1, groups=c)
    gy = F.conv2d(frames, ky, padding=1, groups=c)
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def gradient_pyramid_l1(x: torch.Tensor, y: torch.Tensor,
                        scales: int = 3) -> torch.Tensor:
    """Mean L1 between Sobel gradient magnitudes over a 3-level pyramid.

    Stands in for a pretrained perceptual metric: penalizes edge mismatch
    at multiple scales, supplying the sharpness pressure the reconstruction
    MSE lacks.
    """
    total = x.new_zeros(())
    for level in range(scales):
        if level:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        total = total + (_gradient_magnitude(x) - _gradient_magnitude(y)).abs().mean()
    return total / scales


def vae_losses(frames: torch.Tensor, reconstruction: torch.Tensor,
               common_mean: torch.Tensor, common_logvar: torch.Tensor,
               unique_mean: torch.Tensor, unique_logvar: torch.Tensor,
               cfg: RunConfig, discriminator: PatchDiscriminator | None = None,
               iteration: int = 0) -> dict:
    """Generator-side loss report {rec, kl, adv, perceptual, total}.

    rec averages the per-frame MSE; kl is the closed-form divergence summed
    over both latent sets; adv is the non-saturating generator term, weighted
    into the total only once the warm-up iteration is reached.
    """
    if frames.shape != reconstruction.shape:
        raise ShapeError(
            f"reconstruction shape {tuple(reconstruction.shape)} != clip shape "
            f"{tuple(frames.shape)}"
        )
    batched = frames.ndim == 5
    b = frames.shape[0] if batched else 1
    rec = F.mse_loss(reconstruction, frames)

    kl = (kl_standard_normal(common_mean.reshape(b, -1), common_logvar.reshape(b, -1))
          + kl_standard_normal(unique_mean.reshape(b, -1),
                               unique_logvar.reshape(b, -1))).mean()

    flat_x = frames.reshape(-1, *frames.shape[-3:])
    flat_r = reconstruction.reshape(-1, *reconstruction.shape[-3:])
    perceptual = gradient_pyramid_l1(flat_x, flat_r)

    if discriminator is not None:
        clips_x = frames if batched else frames[None]
        clips_r = reconstruction if batched else reconstruction[None]
        logits_fake = discriminator(clips_r)
        adv = F.binary_cross_entropy_with_logits(
            logits_fake, torch.ones_like(logits_fake)
        )
    else:
        adv = frames.new_zeros(())

    adv_gate = 1.0 if iteration >= cfg.adv_warmup_iters else 0.0
    total = (rec + cfg.kl_weight * kl + cfg.perceptual_weight * perceptual
             + cfg.adv_weight * adv_gate * adv)

    report = {"rec": rec, "kl": kl, "adv": adv, "perceptual": perceptual,
              "total": total}
    for name, value in report.items():
        if not torch.isfinite(value):
            raise TrainingDivergenceError(
                f"non-finite {name} loss",
                breakdown={k: float(v.detach()) for k, v in report.items()},
            )
    return report


def discriminator_loss(discriminator: PatchDiscriminator, real: torch.Tensor,
                       fake: torch.Tensor) -> torch.Tensor:
    """Negated log D(x) + log(1 - D(x_hat)), averaged over patches."""
    logits_real = discriminator(real)
    logits_fake = discriminator(fake.detach())
    return (
        F.binary_cross_entropy_with_logits(logits_real,
                                           torch.ones_like(logits_real))
        + F.binary_cross_entropy_with_logits(logits_fake,
                                             torch.zeros_like(logits_fake))
    )
