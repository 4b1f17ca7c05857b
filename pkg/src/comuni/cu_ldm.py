"""Stage II denoiser: a commonness UNet stream and a uniqueness UNet stream
with temporal attention, exchanging information through joint modules that run
block-wise spatio-temporal attention with multiplicative absolute position
embeddings.

The commonness encoder carries extra down stages (log2(f_u/f_c) of them) so
the two streams meet at shared resolutions; one joint module sits at the end
of every shared encoder level and every shared decoder level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .errors import ConfigError, ShapeError
from .cu_vae import TemporalAttention, _norm


@dataclass
class DenoiserInput:
    noisy_common: np.ndarray            # (1, H/f_c, W/f_c, D) or (H/f_c, W/f_c, D)
    noisy_unique: np.ndarray            # (T, H/f_u, W/f_u, D)
    time: float | np.ndarray            # shared u, or per-part vector (T+1,)
    condition_mask: np.ndarray | None = None   # bool (T+1,), True = held fixed


@dataclass
class NoisePrediction:
    eps_common: np.ndarray
    eps_unique: np.ndarray


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding of u in (0, 1] followed by a two-layer MLP."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=u.dtype, device=u.device)
            / half
        )
        args = u[:, None] * 1000.0 * freqs[None, :]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return self.mlp(emb)


class AdaResBlock(nn.Module):
    """Residual block with per-sample scale/shift computed from the time embedding."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, 2 * out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    """Multi-head self-attention over the spatial sites of one feature map."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(
            b, 3, self.heads, c // self.heads, h * w
        ).unbind(dim=1)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(q.transpose(-2, -1) @ k * scale, dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class PositionEmbeddingTables(nn.Module):
    """Learnable height/width/temporal tables for one joint-module resolution.

    Common and unique embeddings are elementwise triple products: the shared
    spatial tables (he, we) times either the single common temporal vector
    (cte) or the per-frame unique temporal table (ute).
    """

    def __init__(self, resolution: int, frames: int, channels: int):
        super().__init__()
        self.resolution = resolution
        self.frames = frames

        def table(*shape):
            return nn.Parameter(1.0 + 0.02 * torch.randn(*shape))

        self.he_q, self.he_k = table(resolution, channels), table(resolution, channels)
        self.we_q, self.we_k = table(resolution, channels), table(resolution, channels)
        self.cte_q, self.cte_k = table(channels), table(channels)
        self.ute_q, self.ute_k = table(frames, channels), table(frames, channels)

    def _spatial(self, which: str) -> torch.Tensor:
        he = self.he_q if which == "q" else self.he_k
        we = self.we_q if which == "q" else self.we_k
        return he[:, None, :] * we[None, :, :]        # (r, r, C)

    def build_common(self, which: str) -> torch.Tensor:
        """ce: (1, r, r, C) = cte x he x we."""
        cte = self.cte_q if which == "q" else self.cte_k
        return (cte[None, None, :] * self._spatial(which))[None]

    def build_unique(self, which: str) -> torch.Tensor:
        """ue: (T, r, r, C) = ute x he x we."""
        ute = self.ute_q if which == "q" else self.ute_k
        return ute[:, None, None, :] * self._spatial(which)[None]

    def build_stacked(self, which: str) -> torch.Tensor:
        """[ce:ue] along time, (T+1, r, r, C)."""
        return torch.cat([self.build_common(which), self.build_unique(which)], dim=0)


class JointModule(nn.Module):
    """Cross-stream block attention over the (T+1)-long temporal stack.

    The stack is split into ``block_factor**2`` spatial blocks; softmax
    attention runs within matched blocks over all (T+1) * (r/w)^2 tokens.
    Position embeddings enter per ``pe_target``: added to query and key
    ("qk"), to key and value ("kv", value takes the q-table set), or not at
    all ("none").
    """

    def __init__(self, channels: int, heads: int, block_factor: int,
                 pe: PositionEmbeddingTables, pe_target: str):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if pe.resolution % block_factor:
            raise ConfigError(
                f"resolution {pe.resolution} not divisible by block factor "
                f"{block_factor}"
            )
        self.channels = channels
        self.heads = heads
        self.block_factor = block_factor
        self.pe = pe
        self.pe_target = pe_target
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def _split_blocks(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T+1, r, r, C) -> (B*w*w, (T+1)*rb*rb, C), w = block_factor."""
        b, t1, r, _, c = x.shape
        w = self.block_factor
        rb = r // w
        x = x.reshape(b, t1, w, rb, w, rb, c)
        x = x.permute(0, 2, 4, 1, 3, 5, 6)
        return x.reshape(b * w * w, t1 * rb * rb, c)

    def _merge_blocks(self, x: torch.Tensor, b: int, t1: int, r: int) -> torch.Tensor:
        w = self.block_factor
        rb = r // w
        x = x.reshape(b, w, w, t1, rb, rb, self.channels)
        x = x.permute(0, 3, 1, 4, 2, 5, 6)
        return x.reshape(b, t1, r, r, self.channels)

    def forward(self, h_common: torch.Tensor, h_unique: torch.Tensor,
                export_attention: bool = False):
        """h_common: (B, 1, C, r, r); h_unique: (B, T, C, r, r)."""
        if h_common.shape[-1] != h_unique.shape[-1] or \
                h_common.shape[2] != h_unique.shape[2]:
            raise ShapeError(
                f"joint module needs equal spatial dims and channels, got "
                f"{tuple(h_common.shape)} vs {tuple(h_unique.shape)}"
            )
        b, t, c, r, _ = h_unique.shape
        z = torch.cat([h_common, h_unique], dim=1)       # (B, T+1, C, r, r)
        t1 = t + 1

        normed = self.norm(z.reshape(b * t1, c, r, r)).reshape(b, t1, c, r, r)
        tokens = normed.permute(0, 1, 3, 4, 2)           # (B, T+1, r, r, C)
        q = self.to_q(tokens)
        k = self.to_k(tokens)
        v = self.to_v(tokens)

        if self.pe_target != "none":
            pe_q = self.pe.build_stacked("q")[None]
            pe_k = self.pe.build_stacked("k")[None]
            if self.pe_target == "qk":
                q = q + pe_q
                k = k + pe_k
            else:  # kv
                k = k + pe_k
                v = v + pe_q

        qb = self._split_blocks(q)
        kb = self._split_blocks(k)
        vb = self._split_blocks(v)
        nh = self.heads
        hd = c // nh
        n = qb.shape[1]

        def heads_view(x):
            return x.reshape(-1, n, nh, hd).transpose(1, 2)  # (B*w^2, nh, N, hd)

        qh, kh, vh = heads_view(qb), heads_view(kb), heads_view(vb)
        attn = torch.softmax(qh @ kh.transpose(-2, -1) * hd ** -0.5, dim=-1)
        out = attn @ vh
        out = out.transpose(1, 2).reshape(-1, n, c)
        out = self._merge_blocks(self.proj(out), b, t1, r)
        z = z + out.permute(0, 1, 4, 2, 3)

        new_common, new_unique = z[:, :1], z[:, 1:]
        if export_attention:
            w2 = self.block_factor ** 2
            return new_common, new_unique, attn.reshape(b, w2, nh, n, n)
        return new_common, new_unique


# -- stream scaffolding -------------------------------------------------------

class _Level(nn.Module):
    """One UNet level: res blocks with optional spatial (+temporal) attention."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, num_blocks: int,
                 use_attention: bool, temporal: bool, heads: int,
                 skip_channels=None):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attns = nn.ModuleList()
        self.temporals = nn.ModuleList()
        ch = in_ch
        for i in range(num_blocks):
            extra = skip_channels[i] if skip_channels else 0
            self.blocks.append(AdaResBlock(ch + extra, out_ch, temb_dim))
            self.attns.append(SpatialAttention(out_ch, heads)
                              if use_attention else nn.Identity())
            self.temporals.append(TemporalAttention(out_ch)
                                  if use_attention and temporal else nn.Identity())
            ch = out_ch


class CuLdm(nn.Module):
    """Two coupled denoising streams over the common and unique latents."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        mults = cfg.channel_multiplies
        delta = cfg.extra_down_stages
        self.num_levels_common = len(mults)
        self.num_levels_unique = len(mults) - delta
        if self.num_levels_unique < 1:
            raise ConfigError("no shared resolutions between the two streams")
        self.delta = delta
        m = cfg.model_dim
        self.heads = max(1, m // 32)
        temb = 4 * m
        self.time_embed = TimeEmbedding(m, temb)

        self.common_res_levels = [cfg.common_res >> i
                                  for i in range(self.num_levels_common)]
        self.unique_res_levels = [cfg.unique_res >> i
                                  for i in range(self.num_levels_unique)]
        self.shared_resolutions = list(self.unique_res_levels)
        ch_common = [m * mult for mult in mults]
        ch_unique = [m * mults[j + delta] for j in range(self.num_levels_unique)]

        def attn_at(res):
            return res in cfg.attention_resolutions

        nb = cfg.num_res_blocks

        # ---- commonness stream ----
        self.c_stem = nn.Conv2d(cfg.latent_dim, ch_common[0], 3, padding=1)
        self.c_enc = nn.ModuleList()
        self.c_down = nn.ModuleList()
        enc_skips = [ch_common[0]]
        ch = ch_common[0]
        for i, res in enumerate(self.common_res_levels):
            level = _Level(ch, ch_common[i], temb, nb, attn_at(res), False,
                           self.heads)
            ch = ch_common[i]
            enc_skips += [ch] * nb
            self.c_enc.append(level)
            if i < self.num_levels_common - 1:
                self.c_down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                enc_skips.append(ch)
        self.c_mid1 = AdaResBlock(ch, ch, temb)
        self.c_mid_attn = SpatialAttention(ch, self.heads)
        self.c_mid2 = AdaResBlock(ch, ch, temb)
        self.c_dec = nn.ModuleList()
        self.c_up = nn.ModuleList()
        self._c_skips_build = list(enc_skips)
        for i in reversed(range(self.num_levels_common)):
            res = self.common_res_levels[i]
            skips = [self._c_skips_build.pop() for _ in range(nb + 1)]
            level = _Level(ch, ch_common[i], temb, nb + 1, attn_at(res), False,
                           self.heads, skip_channels=skips)
            ch = ch_common[i]
            self.c_dec.append(level)
            if i > 0:
                self.c_up.append(nn.Conv2d(ch, ch_common[i - 1], 3, padding=1))
                ch = ch_common[i - 1]
        self.c_out_norm = _norm(ch)
        self.c_out = nn.Conv2d(ch, cfg.latent_dim, 3, padding=1)
        nn.init.zeros_(self.c_out.weight)
        nn.init.zeros_(self.c_out.bias)

        # ---- uniqueness stream ----
        self.u_stem = nn.Conv2d(cfg.latent_dim, ch_unique[0], 3, padding=1)
        self.u_enc = nn.ModuleList()
        self.u_down = nn.ModuleList()
        enc_skips_u = [ch_unique[0]]
        ch = ch_unique[0]
        for j, res in enumerate(self.unique_res_levels):
            level = _Level(ch, ch_unique[j], temb, nb, attn_at(res), True,
                           self.heads)
            ch = ch_unique[j]
            enc_skips_u += [ch] * nb
            self.u_enc.append(level)
            if j < self.num_levels_unique - 1:
                self.u_down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                enc_skips_u.append(ch)
        self.u_mid1 = AdaResBlock(ch, ch, temb)
        self.u_mid_attn = SpatialAttention(ch, self.heads)
        self.u_mid_temporal = TemporalAttention(ch)
        self.u_mid2 = AdaResBlock(ch, ch, temb)
        self.u_dec = nn.ModuleList()
        self.u_up = nn.ModuleList()
        self._u_skips_build = list(enc_skips_u)
        for j in reversed(range(self.num_levels_unique)):
            res = self.unique_res_levels[j]
            skips = [self._u_skips_build.pop() for _ in range(nb + 1)]
            level = _Level(ch, ch_unique[j], temb, nb + 1, attn_at(res), True,
                           self.heads, skip_channels=skips)
            ch = ch_unique[j]
            self.u_dec.append(level)
            if j > 0:
                self.u_up.append(nn.Conv2d(ch, ch_unique[j - 1], 3, padding=1))
                ch = ch_unique[j - 1]
        self.u_out_norm = _norm(ch)
        self.u_out = nn.Conv2d(ch, cfg.latent_dim, 3, padding=1)
        nn.init.zeros_(self.u_out.weight)
        nn.init.zeros_(self.u_out.bias)

        # ---- joint modules (one per shared encoder level + decoder level) ----
        self.pe_tables = nn.ModuleDict()
        self.joint_enc = nn.ModuleList()
        self.joint_dec = nn.ModuleList()
        if cfg.joint_modules_enabled:
            for j, res in enumerate(self.unique_res_levels):
                self.pe_tables[f"r{res}"] = PositionEmbeddingTables(
                    res, cfg.frames, ch_unique[j]
                )
            for j, res in enumerate(self.unique_res_levels):
                self.joint_enc.append(JointModule(
                    ch_unique[j], self.heads, cfg.block_factor,
                    self.pe_tables[f"r{res}"], cfg.pe_target,
                ))
            for j, res in enumerate(reversed(self.unique_res_levels)):
                ch_j = ch_unique[self.num_levels_unique - 1 - j]
                self.joint_dec.append(JointModule(
                    ch_j, self.heads, cfg.block_factor,
                    self.pe_tables[f"r{res}"], cfg.pe_target,
                ))

    # ---- helpers ----

    @property
    def num_down_stages_common(self) -> int:
        return len(self.c_down)

    @property
    def num_down_stages_unique(self) -> int:
        return len(self.u_down)

    def zero_joint_projections(self) -> None:
        for module in list(self.joint_enc) + list(self.joint_dec):
            nn.init.zeros_(module.proj.weight)
            nn.init.zeros_(module.proj.bias)

    def _run_level(self, level: _Level, x, temb, frames=None, skips=None,
                   pop_from=None):
        for block, attn, tattn in zip(level.blocks, level.attns, level.temporals):
            if pop_from is not None:
                x = torch.cat([x, pop_from.pop()], dim=1)
            x = block(x, temb)
            if not isinstance(attn, nn.Identity):
                x = attn(x)
                if not isinstance(tattn, nn.Identity):
                    x = tattn(x, frames)
            if skips is not None:
                skips.append(x)
        return x

    # ---- the batched torch forward ----

    def forward(self, common: torch.Tensor, unique: torch.Tensor,
                t_common: torch.Tensor, t_unique: torch.Tensor,
                export_attention: bool = False):
        """common: (B, D, hc, wc); unique: (B, T, D, hu, wu);
        t_common: (B,); t_unique: (B, T)."""
        b, t, d, hu, wu = unique.shape
        if t != self.cfg.frames:
            raise ShapeError(f"model is fixed to T={self.cfg.frames}, got {t}")
        temb_c = self.time_embed(t_common)
        temb_u = self.time_embed(t_unique.reshape(b * t))

        attn_maps = {}
        xc = self.c_stem(common)
        xu = self.u_stem(unique.reshape(b * t, d, hu, wu))
        skips_c = [xc]
        skips_u = [xu]

        # encoder: common walks its extra top levels alone, then both in sync
        for i in range(self.delta):
            xc = self._run_level(self.c_enc[i], xc, temb_c, skips=skips_c)
            xc = self.c_down[i](xc)
            skips_c.append(xc)
        for j in range(self.num_levels_unique):
            i = self.delta + j
            xc = self._run_level(self.c_enc[i], xc, temb_c, skips=skips_c)
            xu = self._run_level(self.u_enc[j], xu, temb_u, frames=t,
                                 skips=skips_u)
            if self.joint_enc:
                hc = xc[:, None]
                hu_ = xu.reshape(b, t, *xu.shape[1:])
                result = self.joint_enc[j](hc, hu_, export_attention)
                if export_attention:
                    hc, hu_, attn_maps[f"enc_r{self.unique_res_levels[j]}"] = result
                else:
                    hc, hu_ = result
                xc = hc[:, 0]
                xu = hu_.reshape(b * t, *xu.shape[1:])
                skips_c[-1] = xc
                skips_u[-1] = xu
            if j < self.num_levels_unique - 1:
                xc = self.c_down[self.delta + j](xc)
                skips_c.append(xc)
                xu = self.u_down[j](xu)
                skips_u.append(xu)

        xc = self.c_mid2(self.c_mid_attn(self.c_mid1(xc, temb_c)), temb_c)
        xu = self.u_mid1(xu, temb_u)
        xu = self.u_mid_temporal(self.u_mid_attn(xu), t)
        xu = self.u_mid2(xu, temb_u)

        # decoder: both streams in sync on shared levels, then common alone
        for j in range(self.num_levels_unique):
            i = self.num_levels_common - 1 - j
            xc = self._run_level(self.c_dec[j], xc, temb_c, pop_from=skips_c)
            xu = self._run_level(self.u_dec[j], xu, temb_u, frames=t,
                                 pop_from=skips_u)
            if self.joint_dec:
                hc = xc[:, None]
                hu_ = xu.reshape(b, t, *xu.shape[1:])
                result = self.joint_dec[j](hc, hu_, export_attention)
                res_j = self.unique_res_levels[self.num_levels_unique - 1 - j]
                if export_attention:
                    hc, hu_, attn_maps[f"dec_r{res_j}"] = result
                else:
                    hc, hu_ = result
                xc = hc[:, 0]
                xu = hu_.reshape(b * t, *xu.shape[1:])
            if j < self.num_levels_unique - 1:
                xu = F.interpolate(xu, scale_factor=2, mode="nearest")
                xu = self.u_up[j](xu)
            if i > 0:
                xc = F.interpolate(xc, scale_factor=2, mode="nearest")
                xc = self.c_up[j](xc)
        for j in range(self.num_levels_unique, self.num_levels_common):
            i = self.num_levels_common - 1 - j
            xc = self._run_level(self.c_dec[j], xc, temb_c, pop_from=skips_c)
            if i > 0:
                xc = F.interpolate(xc, scale_factor=2, mode="nearest")
                xc = self.c_up[j](xc)

        eps_c = self.c_out(F.silu(self.c_out_norm(xc)))
        eps_u = self.u_out(F.silu(self.u_out_norm(xu)))
        eps_u = eps_u.reshape(b, t, d, hu, wu)
        if export_attention:
            return eps_c, eps_u, attn_maps
        return eps_c, eps_u

    # ---- public numpy-facing API ----

    def _prepare_times(self, inp: DenoiserInput) -> tuple[np.ndarray, np.ndarray]:
        t = self.cfg.frames
        time = np.asarray(inp.time, dtype=np.float32)
        if time.ndim == 0:
            times = np.full(t + 1, float(time), dtype=np.float32)
        elif time.shape == (t + 1,):
            times = time.astype(np.float32).copy()
        else:
            raise ShapeError(
                f"time must be scalar or length T+1={t + 1}, got shape {time.shape}"
            )
        if inp.condition_mask is not None:
            mask = np.asarray(inp.condition_mask, dtype=bool)
            if mask.shape != (t + 1,):
                raise ShapeError(
                    f"condition mask must have length T+1={t + 1}, got {mask.shape}"
                )
            times[mask] = 0.0
        return times[:1], times[1:]

    @torch.no_grad()
    def predict_noise(self, inp: DenoiserInput, export_attention: bool = False):
        cfg = self.cfg
        common = np.asarray(inp.noisy_common, dtype=np.float32)
        if common.ndim == 4 and common.shape[0] == 1:
            common = common[0]
        if common.shape != cfg.common_latent_shape():
            raise ShapeError(
                f"common latent shape {common.shape} != "
                f"{cfg.common_latent_shape()}"
            )
        unique = np.asarray(inp.noisy_unique, dtype=np.float32)
        if unique.shape != cfg.unique_latent_shape():
            raise ShapeError(
                f"unique latent shape {unique.shape} != "
                f"{cfg.unique_latent_shape()}"
            )
        t_c, t_u = self._prepare_times(inp)
        xc = torch.from_numpy(common).permute(2, 0, 1)[None]
        xu = torch.from_numpy(unique).permute(0, 3, 1, 2)[None]
        out = self.forward(
            xc, xu,
            torch.from_numpy(t_c), torch.from_numpy(t_u)[None],
            export_attention=export_attention,
        )
        if export_attention:
            eps_c, eps_u, maps = out
            maps = {k: v.cpu().numpy() for k, v in maps.items()}
        else:
            eps_c, eps_u = out
        pred = NoisePrediction(
            eps_common=eps_c[0].permute(1, 2, 0).cpu().numpy(),
            eps_unique=eps_u[0].permute(0, 2, 3, 1).cpu().numpy(),
        )
        return (pred, maps) if export_attention else pred
