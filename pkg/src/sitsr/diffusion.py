"""Conditional DDPM decoder in the SRDiff style.

The chain generates the residual between HR and the bicubic upsample of the
frame closest to the reference date. A small U-Net predicts the noise from
the noisy residual, the diffusion step and a conditioning feature map, which
is the upsampled LR frame itself, RRDB features of that frame, or the fused
HighRes-net L-TAE features of the whole series.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, DomainError, StateError
from .datapipe import resample_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet_width: int = 32
    unet_mults: tuple = (1, 2, 4)
    cond_channels: int = 16
    x0_scale: float = 2.0  # unit-range residual -> [-1, 1]-style scale
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("diffusion.steps must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        object.__setattr__(self, "unet_mults", tuple(self.unet_mults))

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown diffusion keys: {sorted(unknown)}")
        return cls(**d)


class NoiseSchedule:
    """Linear beta schedule with 1-based step indices ``t = 1..steps``."""

    def __init__(self, steps: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02,
                 betas: Optional[np.ndarray] = None):
        b = np.linspace(beta_start, beta_end, steps, dtype=np.float64) if betas is None else np.asarray(betas, np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("betas must be a non-empty vector")
        if not (np.all(b > 0) and np.all(b < 1) and np.all(np.diff(b) >= 0)):
            raise ConfigError("betas must be non-decreasing inside (0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bar = np.cumprod(self.alphas)
        self.steps = b.size
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.posterior_var = b * (1.0 - prev) / (1.0 - self.alpha_bar)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig) -> "NoiseSchedule":
        return cls(cfg.steps, cfg.beta_start, cfg.beta_end)

    def check_step(self, t: int):
        if not 1 <= int(t) <= self.steps:
            raise DomainError(f"diffusion step {t} outside 1..{self.steps}")

    def ab(self, t):
        """alpha_bar at 1-based step(s) ``t``."""
        return self.alpha_bar[np.asarray(t) - 1]


def _coef(values, t, like):
    """Per-batch schedule coefficients broadcast against ``like``."""
    v = torch.as_tensor(np.asarray(values)[np.asarray(t) - 1], dtype=like.dtype)
    return v.reshape(-1, *([1] * (like.ndim - 1))) if v.ndim else v


def forward_sample(x0, t, noise, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.

    ``t`` may be a scalar or one step per batch element; works on numpy
    arrays and torch tensors.
    """
    ts = np.atleast_1d(np.asarray(t))
    if ts.min() < 1 or ts.max() > schedule.steps:
        raise DomainError(f"diffusion step {t} outside 1..{schedule.steps}")
    if isinstance(x0, torch.Tensor):
        ab = _coef(schedule.alpha_bar, t, x0)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    ab = schedule.ab(t)
    if np.ndim(ab):
        ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise


def reverse_step(x_t, t: int, predicted_noise, schedule: NoiseSchedule,
                 generator: Optional[torch.Generator] = None):
    """One ancestral DDPM step x_t -> x_{t-1} with posterior variance; no noise at t = 1."""
    schedule.check_step(t)
    beta, alpha, ab = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bar[t - 1]
    mean = (x_t - beta / math.sqrt(1.0 - ab) * predicted_noise) / math.sqrt(alpha)
    if t == 1:
        return mean
    sigma = math.sqrt(schedule.posterior_var[t - 1])
    if isinstance(x_t, torch.Tensor):
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    else:
        rng = generator if isinstance(generator, np.random.Generator) else np.random.default_rng()
        z = rng.standard_normal(np.shape(x_t))
    return mean + sigma * z


def clipped_reverse_step(x_t, t: int, predicted_noise, schedule: NoiseSchedule, lo, hi,
                         generator: Optional[torch.Generator] = None):
    """Ancestral step through the clamped x0 estimate.

    Same posterior as ``reverse_step`` when the estimate lies inside
    ``[lo, hi]``; keeps an imperfect predictor from drifting out of range.
    """
    schedule.check_step(t)
    beta, alpha, ab = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bar[t - 1]
    prev = schedule.alpha_bar[t - 2] if t > 1 else 1.0
    x0 = (x_t - math.sqrt(1.0 - ab) * predicted_noise) / math.sqrt(ab)
    x0 = torch.maximum(torch.minimum(x0, hi), lo)
    mean = (beta * math.sqrt(prev) / (1.0 - ab)) * x0 + ((1.0 - prev) * math.sqrt(alpha) / (1.0 - ab)) * x_t
    if t == 1:
        return mean
    z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(schedule.posterior_var[t - 1]) * z


# -- noise predictor ---------------------------------------------------------------

def step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class _TBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(_groups(cin), cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(tdim, cout)
        self.n2 = nn.GroupNorm(_groups(cout), cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Three-resolution U-Net: x_t and the condition are concatenated at the input."""

    def __init__(self, in_ch: int = 3, cond_ch: int = 16, width: int = 32, mults=(1, 2, 4)):
        super().__init__()
        self.in_ch, self.cond_ch, self.width = in_ch, cond_ch, width
        tdim = 4 * width
        self.temb = nn.Sequential(nn.Linear(width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        chans = [width * m for m in mults]
        self.inp = nn.Conv2d(in_ch + cond_ch, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_blocks.append(_TBlock(prev, c, tdim))
            prev = c
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = _TBlock(prev, prev, tdim)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.ups.append(nn.Conv2d(prev, prev, 3, padding=1))
            self.up_blocks.append(_TBlock(prev + c, c, tdim))
            prev = c
        self.out = nn.Sequential(nn.GroupNorm(_groups(prev), prev), nn.SiLU(), nn.Conv2d(prev, in_ch, 3, padding=1))
        # an untrained predictor outputs zero noise
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def forward(self, x, t, cond):
        if cond.shape[1] != self.cond_ch:
            raise ConfigError(f"condition has {cond.shape[1]} channels, noise predictor expects {self.cond_ch}")
        if cond.shape[-2:] != x.shape[-2:]:
            raise ConfigError(f"condition size {tuple(cond.shape[-2:])} != image size {tuple(x.shape[-2:])}")
        temb = self.temb(step_embedding(t, self.width).to(x.dtype))
        h = self.inp(torch.cat([x, cond], 1))
        skips = []
        for i, blk in enumerate(self.down_blocks):
            h = blk(h, temb)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        h = self.mid(h, temb)
        for up, blk in zip(self.ups, self.up_blocks):
            skip = skips.pop()
            h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = blk(torch.cat([h, skip], 1), temb)
        return self.out(h)


# -- SRDiff ------------------------------------------------------------------------

def bicubic_upsample_torch(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Catmull-Rom upsampling matching ``datapipe.bicubic_resample``."""
    h, w = x.shape[-2:]
    mh = torch.as_tensor(resample_matrix(h, h * scale), dtype=x.dtype)
    mw = torch.as_tensor(resample_matrix(w, w * scale), dtype=x.dtype)
    return mh @ x @ mw.T


def closest_in_batch(gaps: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Index of the frame nearest t_ref per row; ties to the earlier date, then lower index."""
    T = gaps.shape[1]
    g = gaps.to(torch.int64)
    key = g.abs() * 4 * (T + 1) + (g > 0).to(torch.int64) * 2 * (T + 1) + torch.arange(T)
    if mask is not None:
        key = key.masked_fill(~mask, torch.iinfo(torch.int64).max)
    return key.argmin(dim=1)


class SRDiff(nn.Module):
    def __init__(self, spec):
        super().__init__()
        from .backbones import RRDBEncoder, SRModel

        self.spec = spec
        self.cfg = DiffusionConfig.from_dict(dict(spec.diffusion))
        self.schedule = NoiseSchedule.from_config(self.cfg)
        if self.schedule.alpha_bar[-1] > 0.05:
            # sampling starts from N(0, 1), which this schedule never reaches
            log.warning("alpha_bar at the last step is %.3f; raise beta_end or steps",
                        self.schedule.alpha_bar[-1])
        kind = spec.kind
        nf = spec.base_channels
        if kind == "srdiff_bicubic":
            self.conditioner = None
            cond_ch = spec.in_channels
            self.cond_proj = nn.Identity()
        else:
            if kind == "srdiff_rrdb":
                self.conditioner = RRDBEncoder(spec.in_channels, nf, spec.n_rrdb_blocks, spec.growth_channels)
            else:
                inner = dataclasses.replace(spec, kind="highresnet_ltae", diffusion={})
                self.conditioner = SRModel(inner)
                self.conditioner.decoder = nn.Identity()
            cond_ch = self.cfg.cond_channels
            self.cond_proj = nn.Conv2d(nf, cond_ch, 1)
        self.noise_predictor = UNet(spec.in_channels, cond_ch, self.cfg.unet_width, self.cfg.unet_mults)
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def anchor_and_condition(self, lr, gaps, mask=None):
        B = lr.shape[0]
        idx = closest_in_batch(gaps, mask)
        closest = lr[torch.arange(B), idx]
        anchor = bicubic_upsample_torch(closest, self.spec.scale)
        if self.conditioner is None:
            return anchor, anchor
        if self.spec.kind == "srdiff_rrdb":
            feats = self.conditioner(closest)
        else:
            feats = self.conditioner.features(lr, gaps, mask)
        feats = F.interpolate(feats, scale_factor=self.spec.scale, mode="nearest")
        return anchor, self.cond_proj(feats)

    def loss(self, lr, gaps, hr, mask=None, generator: Optional[torch.Generator] = None,
             steps: Optional[torch.Tensor] = None):
        """L1 between true and predicted noise at uniformly drawn steps."""
        anchor, cond = self.anchor_and_condition(lr, gaps, mask)
        x0 = (hr - anchor) * self.cfg.x0_scale
        B = x0.shape[0]
        if steps is None:
            steps = torch.randint(1, self.schedule.steps + 1, (B,), generator=generator)
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x_t = forward_sample(x0, steps.numpy(), noise, self.schedule)
        pred = self.noise_predictor(x_t, steps, cond)
        return (pred - noise).abs().mean()

    @torch.no_grad()
    def sample(self, lr, gaps, mask=None, seed: int = 0, clip: bool = True):
        if not bool(self.trained):
            raise StateError("diffusion model has no trained parameters loaded")
        gen = torch.Generator().manual_seed(int(seed))
        anchor, cond = self.anchor_and_condition(lr, gaps, mask)
        x = torch.randn(anchor.shape, generator=gen, dtype=anchor.dtype)
        B = x.shape[0]
        # the residual that keeps anchor + residual inside the unit range
        lo, hi = -anchor * self.cfg.x0_scale, (1.0 - anchor) * self.cfg.x0_scale
        for t in range(self.schedule.steps, 0, -1):
            eps = self.noise_predictor(x, torch.full((B,), t, dtype=torch.int64), cond)
            if clip:
                x = clipped_reverse_step(x, t, eps, self.schedule, lo, hi, gen)
            else:
                x = reverse_step(x, t, eps, self.schedule, gen)
        out = anchor + x / self.cfg.x0_scale
        return out.clamp(0.0, 1.0) if clip else out


def train_step(model: SRDiff, lr, gaps, hr, mask=None, generator=None):
    """Diffusion training loss for one batch (backward is left to the caller)."""
    return model.loss(lr, gaps, hr, mask, generator)
